/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const descent_path: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const explore_regularizers: (a: number, b: number) => [number, number, number, number];
export const group_sparsity: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;

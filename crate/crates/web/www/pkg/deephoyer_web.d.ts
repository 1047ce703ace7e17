/* tslint:disable */
/* eslint-disable */

/**
 * Hoyer-Square-only gradient descent from a seeded standard-normal start.
 */
export function descent_path(dim: number, steps: number, lr: number, seed: bigint): string;

/**
 * Values and gradients of every element-wise regularizer for `weights`,
 * with the Hoyer sparsity measure and the Hoyer-Square trimming threshold.
 */
export function explore_regularizers(weights: Float64Array): string;

/**
 * Group-HS over the rows and the columns of a `rows × cols` matrix, and
 * which rows/columns a group-norm threshold would remove.
 */
export function group_sparsity(weights: Float64Array, rows: number, cols: number, threshold: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly descent_path: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly explore_regularizers: (a: number, b: number) => [number, number, number, number];
    readonly group_sparsity: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;

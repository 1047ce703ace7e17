//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export returns a JSON string so the page can stay plain JavaScript.

use deephoyer::descent::{hoyer_square_descent, DescentConfig};
use deephoyer::regularizers::{self, GroupKind, GroupScheme, RegularizerKind, RegularizerSpec};
use deephoyer::Tensor;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Upper bound on recorded descent points so the page stays responsive.
const MAX_POINTS: usize = 2000;

fn to_js<T: Serialize>(value: &T) -> Result<String, JsError> {
    serde_json::to_string(value).map_err(|e| JsError::new(&e.to_string()))
}

fn js_err(e: deephoyer::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct RegularizerEntry {
    kind: &'static str,
    value: f64,
    gradient: Vec<f64>,
}

#[derive(Serialize)]
struct RegularizerSummary {
    /// `None` when the vector is all zero or has fewer than two entries.
    hoyer_measure: Option<f64>,
    trimming_threshold: f64,
    regularizers: Vec<RegularizerEntry>,
}

/// Values and gradients of every element-wise regularizer for `weights`,
/// with the Hoyer sparsity measure and the Hoyer-Square trimming threshold.
#[wasm_bindgen]
pub fn explore_regularizers(weights: &[f64]) -> Result<String, JsError> {
    if weights.is_empty() {
        return Err(JsError::new("enter at least one weight"));
    }
    let w = Tensor::vector(weights.to_vec());
    let mut entries = Vec::new();
    for kind in RegularizerKind::ALL {
        if kind == RegularizerKind::GroupHs {
            continue;
        }
        let spec = RegularizerSpec::new(kind, 1.0).map_err(js_err)?;
        entries.push(RegularizerEntry {
            kind: kind.name(),
            value: spec.value(&w).map_err(js_err)?,
            gradient: spec.gradient(&w).map_err(js_err)?.into_data(),
        });
    }
    to_js(&RegularizerSummary {
        hoyer_measure: regularizers::hoyer_measure(&w).ok(),
        trimming_threshold: regularizers::trimming_threshold(weights),
        regularizers: entries,
    })
}

#[derive(Serialize)]
struct DescentPath {
    steps: Vec<usize>,
    /// One trajectory per coordinate.
    paths: Vec<Vec<f64>>,
    threshold: Vec<f64>,
    below_1e2: usize,
    dominant_retention: f64,
}

/// Hoyer-Square-only gradient descent from a seeded standard-normal start.
#[wasm_bindgen]
pub fn descent_path(dim: usize, steps: usize, lr: f64, seed: u64) -> Result<String, JsError> {
    let stride = steps.div_ceil(MAX_POINTS).max(1);
    let trace = hoyer_square_descent(&DescentConfig {
        dim,
        steps,
        lr,
        seed,
        stride,
    })
    .map_err(js_err)?;
    let paths = (0..dim)
        .map(|i| trace.points.iter().map(|p| p.weights[i]).collect())
        .collect();
    to_js(&DescentPath {
        steps: trace.points.iter().map(|p| p.step).collect(),
        paths,
        threshold: trace.points.iter().map(|p| p.threshold).collect(),
        below_1e2: trace.count_below(1e-2),
        dominant_retention: trace.dominant_retention(),
    })
}

#[derive(Serialize)]
struct GroupSummary {
    rows: usize,
    cols: usize,
    row_norms: Vec<f64>,
    col_norms: Vec<f64>,
    group_hs_rows: f64,
    group_hs_cols: f64,
    /// Gradient of the row plus column Group-HS, row-major.
    gradient: Vec<f64>,
    /// Rows and columns whose norm is below `threshold`.
    pruned_rows: Vec<usize>,
    pruned_cols: Vec<usize>,
}

/// Group-HS over the rows and the columns of a `rows × cols` matrix, and
/// which rows/columns a group-norm threshold would remove.
#[wasm_bindgen]
pub fn group_sparsity(weights: &[f64], rows: usize, cols: usize, threshold: f64) -> Result<String, JsError> {
    if rows == 0 || cols == 0 || weights.len() != rows * cols {
        return Err(JsError::new(&format!(
            "expected {rows}×{cols} = {} weights, got {}",
            rows * cols,
            weights.len()
        )));
    }
    let w = Tensor::matrix(rows, cols, weights.to_vec()).map_err(js_err)?;
    let shape = [rows, cols];
    let by_rows = GroupScheme::for_weight_shape(GroupKind::FcRows, &shape).map_err(js_err)?;
    let by_cols = GroupScheme::for_weight_shape(GroupKind::FcColumns, &shape).map_err(js_err)?;
    let row_norms = by_rows.group_norms(weights);
    let col_norms = by_cols.group_norms(weights);
    let rows_spec = RegularizerSpec::group_hs(by_rows, 1.0).map_err(js_err)?;
    let cols_spec = RegularizerSpec::group_hs(by_cols, 1.0).map_err(js_err)?;
    let gradient = rows_spec
        .gradient(&w)
        .and_then(|g| g.add(&cols_spec.gradient(&w)?))
        .map_err(js_err)?
        .into_data();
    let below = |norms: &[f64]| (0..norms.len()).filter(|&i| norms[i] < threshold).collect();
    to_js(&GroupSummary {
        rows,
        cols,
        pruned_rows: below(&row_norms),
        pruned_cols: below(&col_norms),
        group_hs_rows: rows_spec.value(&w).map_err(js_err)?,
        group_hs_cols: cols_spec.value(&w).map_err(js_err)?,
        row_norms,
        col_norms,
        gradient,
    })
}

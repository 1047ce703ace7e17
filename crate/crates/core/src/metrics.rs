//! Sparsity accounting, surviving structure and FLOPs.
//!
//! FLOPs are multiply-accumulates. A dense boundary with `n_in` live inputs
//! and `n_out` live outputs costs `n_in·n_out`; a conv layer costs
//! `H_out·W_out·k²·c_in·c_out` over live channels.
//!
//! A structure vector lists, in order, the live filter count of every conv
//! layer, the live input columns of the first dense layer, and the live
//! outputs of every hidden dense layer. Network outputs always survive and
//! are not listed. LeNet-300-100 unpruned is `[784, 300, 100]`, LeNet-5 is
//! `[20, 50, 800, 500]`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_lenet300100, build_lenet5, Architecture, LayerKind, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: usize,
    pub total: usize,
    pub nonzero: usize,
    pub percent: f64,
}

/// Nonzero weight count of every parametric layer, in layer order.
pub fn count_nonzero(net: &Network) -> Vec<LayerSparsity> {
    net.layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.params.as_ref().map(|p| (i, p)))
        .map(|(layer, p)| {
            let total = p.weight.len();
            let nonzero = p.weight.count_nonzero();
            LayerSparsity {
                layer,
                total,
                nonzero,
                percent: 100.0 * nonzero as f64 / total as f64,
            }
        })
        .collect()
}

fn any_nonzero(values: impl IntoIterator<Item = f64>) -> bool {
    values.into_iter().any(|v| v != 0.0)
}

/// Does output unit `o` of parametric layer `layer` feed anything in the
/// next parametric layer?
fn feeds_next(net: &Network, next: usize, o: usize, per_unit: usize) -> bool {
    let p = &net.layers()[next].params.as_ref().expect("parametric").weight;
    match net.layers()[next].kind {
        LayerKind::Dense { inputs, outputs } => (0..outputs).any(|r| {
            let row = &p.data()[r * inputs..(r + 1) * inputs];
            any_nonzero(row[o * per_unit..(o + 1) * per_unit].iter().copied())
        }),
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
        } => {
            let slab = kernel * kernel;
            (0..out_channels).any(|f| {
                let start = (f * in_channels + o) * slab;
                any_nonzero(p.data()[start..start + slab].iter().copied())
            })
        }
        _ => unreachable!("parametric layers are dense or conv"),
    }
}

/// Live structure of a network (see the module docs for the layout).
///
/// A hidden unit is live when its incoming row or filter is nonzero and
/// something in the next parametric layer reads it.
pub fn surviving_structure(net: &Network) -> Vec<usize> {
    let parametric = net.parametric_indices();
    let mut structure = Vec::new();
    let mut shape = net.input_shape().to_vec();
    let mut seen_dense = false;
    for (i, layer) in net.layers().iter().enumerate() {
        let next_shape = layer.kind.output_shape(&shape).expect("validated chain");
        let pos = parametric.iter().position(|&p| p == i);
        let next = pos.and_then(|k| parametric.get(k + 1)).copied();
        match layer.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
            } => {
                let w = layer.params.as_ref().expect("parametric").weight.data();
                let slab = in_channels * kernel * kernel;
                // Spatial size this conv's channels have once they reach
                // the next parametric layer (after pooling and flattening).
                let per_unit = next.map(|n| units_per_channel(net, n, out_channels));
                let live = (0..out_channels)
                    .filter(|&o| any_nonzero(w[o * slab..(o + 1) * slab].iter().copied()))
                    .filter(|&o| match (next, per_unit) {
                        (Some(n), Some(u)) => feeds_next(net, n, o, u),
                        _ => true,
                    })
                    .count();
                if next.is_some() {
                    structure.push(live);
                }
            }
            LayerKind::Dense { inputs, outputs } => {
                let w = layer.params.as_ref().expect("parametric").weight.data();
                if !seen_dense {
                    seen_dense = true;
                    let live_cols = (0..inputs)
                        .filter(|&c| any_nonzero((0..outputs).map(|r| w[r * inputs + c])))
                        .count();
                    structure.push(live_cols);
                }
                if let Some(n) = next {
                    let live = (0..outputs)
                        .filter(|&o| any_nonzero(w[o * inputs..(o + 1) * inputs].iter().copied()))
                        .filter(|&o| feeds_next(net, n, o, 1))
                        .count();
                    structure.push(live);
                }
            }
            _ => {}
        }
        shape = next_shape;
    }
    structure
}

/// How many inputs of parametric layer `next` each conv output channel
/// occupies: 1 for a following conv, `H·W` for a dense layer after
/// flattening.
fn units_per_channel(net: &Network, next: usize, channels: usize) -> usize {
    match net.layers()[next].kind {
        LayerKind::Dense { inputs, .. } => inputs / channels,
        _ => 1,
    }
}

fn check_count(live: usize, full: usize, what: &str) -> Result<usize> {
    if live > full {
        return Err(Error::Argument(format!(
            "structure claims {live} live {what} but the layer has {full}"
        )));
    }
    Ok(live)
}

/// MAC count of a layer chain with the given live structure.
pub fn chain_flops(kinds: &[LayerKind], input_shape: &[usize], structure: &[usize]) -> Result<u64> {
    let parametric: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i].is_parametric()).collect();
    let last = parametric.last().copied();
    let mut entries = structure.iter().copied();
    let mut next_entry = |what: &str| {
        entries
            .next()
            .ok_or_else(|| Error::Argument(format!("structure is too short: missing {what}")))
    };
    let mut shape = input_shape.to_vec();
    // live units feeding the current layer, once known
    let mut live_in: Option<usize> = if input_shape.len() == 3 { Some(input_shape[0]) } else { None };
    let mut seen_dense = false;
    let mut total: u64 = 0;
    for (i, kind) in kinds.iter().enumerate() {
        let out_shape = kind.output_shape(&shape)?;
        match *kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let c_in = live_in.expect("conv input has channels");
                let c_out = if Some(i) == last {
                    out_channels
                } else {
                    check_count(next_entry("conv filters")?, out_channels, "filters")?
                };
                total += (out_shape[1] * out_shape[2] * kernel * kernel * c_in * c_out) as u64;
                live_in = Some(c_out);
            }
            LayerKind::Dense { inputs, outputs } => {
                let n_in = if !seen_dense {
                    seen_dense = true;
                    check_count(next_entry("dense inputs")?, inputs, "inputs")?
                } else {
                    live_in.expect("previous dense layer")
                };
                let n_out = if Some(i) == last {
                    outputs
                } else {
                    check_count(next_entry("dense outputs")?, outputs, "outputs")?
                };
                total += (n_in * n_out) as u64;
                live_in = Some(n_out);
            }
            _ => {}
        }
        shape = out_shape;
    }
    if entries.next().is_some() {
        return Err(Error::Argument(format!(
            "structure {structure:?} has more entries than the architecture"
        )));
    }
    Ok(total)
}

/// MACs of a named architecture with the given live structure.
pub fn flops(structure: &[usize], architecture: Architecture) -> Result<u64> {
    let net = match architecture {
        Architecture::Lenet300100 => build_lenet300100(0),
        Architecture::Lenet5 => build_lenet5(0),
        Architecture::Custom => {
            return Err(Error::Argument(
                "custom architectures need network_flops on a concrete network".into(),
            ))
        }
    };
    chain_flops(&net.kinds(), net.input_shape(), structure)
}

/// MACs of a network at its current sparsity structure.
pub fn network_flops(net: &Network) -> u64 {
    chain_flops(&net.kinds(), net.input_shape(), &surviving_structure(net))
        .expect("structure derived from the same network")
}

/// MACs of the network with every unit live.
pub fn dense_flops(net: &Network) -> u64 {
    let mut full = Vec::new();
    let mut seen_dense = false;
    let parametric = net.parametric_indices();
    for &i in &parametric {
        let is_last = Some(&i) == parametric.last();
        match net.layers()[i].kind {
            LayerKind::Conv { out_channels, .. } if !is_last => full.push(out_channels),
            LayerKind::Dense { inputs, outputs } => {
                if !seen_dense {
                    seen_dense = true;
                    full.push(inputs);
                }
                if !is_last {
                    full.push(outputs);
                }
            }
            _ => {}
        }
    }
    chain_flops(&net.kinds(), net.input_shape(), &full).expect("full structure is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub architecture: Architecture,
    pub stage: String,
    pub layers: Vec<LayerSparsity>,
    pub total_weights: usize,
    pub total_nonzero: usize,
    pub nonzero_percent: f64,
    pub structure: Vec<usize>,
    pub flops: u64,
    pub dense_flops: u64,
    pub flops_percent: f64,
    #[serde(default)]
    pub test_accuracy: Option<f64>,
    #[serde(default)]
    pub baseline_accuracy: Option<f64>,
}

impl SparsityReport {
    pub fn new(net: &Network, stage: &str, test_accuracy: Option<f64>, baseline_accuracy: Option<f64>) -> Self {
        let layers = count_nonzero(net);
        let total_weights: usize = layers.iter().map(|l| l.total).sum();
        let total_nonzero: usize = layers.iter().map(|l| l.nonzero).sum();
        let flops = network_flops(net);
        let dense = dense_flops(net);
        SparsityReport {
            architecture: net.architecture(),
            stage: stage.to_string(),
            layers,
            total_weights,
            total_nonzero,
            nonzero_percent: 100.0 * total_nonzero as f64 / total_weights as f64,
            structure: surviving_structure(net),
            flops,
            dense_flops: dense,
            flops_percent: 100.0 * flops as f64 / dense as f64,
            test_accuracy,
            baseline_accuracy,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = self.to_json()?;
        json.push('\n');
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn structure_string(&self) -> String {
        self.structure.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges; bin `i` is `[edges[i], edges[i+1])`, the last one closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_left", "bin_right", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                c.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Histogram of the nonzero entries of `values`. The range defaults to the
/// min and max nonzero value; entries outside an explicit range are dropped.
pub fn histogram(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    let nonzero: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
    let (lo, hi) = match range {
        Some((lo, hi)) if lo <= hi && lo.is_finite() && hi.is_finite() => (lo, hi),
        Some(r) => return Err(Error::Argument(format!("invalid histogram range {r:?}"))),
        None if nonzero.is_empty() => (0.0, 0.0),
        None => nonzero
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0; bins];
    for v in nonzero {
        if v < lo || v > hi {
            continue;
        }
        let bin = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Histogram of one layer's nonzero weights.
pub fn weight_histogram(net: &Network, layer: usize, bins: usize) -> Result<Histogram> {
    histogram(net.params(layer)?.weight.data(), bins, None)
}

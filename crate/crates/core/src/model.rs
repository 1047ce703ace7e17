//! Layer graphs, whole-network forward/backward, prune masks and
//! checkpoints.
//!
//! Dense weights are stored `[outputs, inputs]`, so a row is one output
//! neuron and a column one input neuron. Conv kernels are `[O, C, k, k]`.
//! Biases are never masked or regularized.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    argmax_rows, conv2d_backward_batch, conv2d_forward_batch, gemm, maxpool2x2,
    maxpool2x2_backward, relu, relu_backward, softmax_cross_entropy_batch, MatRef, Tensor,
};
use crate::regularizers::{GroupKind, GroupScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    MaxPool2,
    Relu,
    Flatten,
}

impl LayerKind {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => Some(vec![outputs, inputs]),
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    fn bias_len(&self) -> usize {
        match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { out_channels, .. } => out_channels,
            _ => 0,
        }
    }

    /// Per-sample output shape, or a dimension error if `input` does not fit.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::Dimension(format!(
                        "dense layer expects [{inputs}], got {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
            } => match *input {
                [c, h, w] if c == in_channels && kernel <= h && kernel <= w => {
                    Ok(vec![out_channels, h - kernel + 1, w - kernel + 1])
                }
                _ => Err(Error::Dimension(format!(
                    "conv layer ({in_channels}->{out_channels}, k={kernel}) cannot take {input:?}"
                ))),
            },
            LayerKind::MaxPool2 => match *input {
                [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![c, h / 2, w / 2]),
                _ => Err(Error::Dimension(format!(
                    "maxpool expects [C,H,W] with even H, W, got {input:?}"
                ))),
            },
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[serde(rename = "lenet-300-100")]
    Lenet300100,
    #[serde(rename = "lenet-5")]
    Lenet5,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
    /// Binary, same shape as `weight`.
    pub mask: Tensor,
}

impl Params {
    /// Zero every masked weight.
    pub fn apply_mask(&mut self) {
        for (w, &m) in self.weight.data_mut().iter_mut().zip(self.mask.data()) {
            if m == 0.0 {
                *w = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: Option<Params>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    architecture: Architecture,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
}

/// Per-layer gradients of the mean batch loss, aligned with the layer list.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    /// Number of samples whose argmax matched the label.
    pub correct: usize,
    pub layers: Vec<Option<ParamGrads>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            loss: 0.0,
            correct: 0,
            layers: net
                .layers
                .iter()
                .map(|l| {
                    l.params.as_ref().map(|p| ParamGrads {
                        weight: Tensor::zeros(p.weight.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
        }
    }
}

enum Cache {
    Input(Tensor),
    Pool(Vec<usize>),
    None,
}

impl Network {
    /// Builds a network with weights and biases drawn uniformly from
    /// `±√(1/fan_in)` and all-ones masks.
    pub fn new(
        architecture: Architecture,
        input_shape: Vec<usize>,
        kinds: Vec<LayerKind>,
        seed: u64,
    ) -> Result<Self> {
        let mut shape = input_shape.clone();
        for kind in &kinds {
            shape = kind.output_shape(&shape)?;
        }
        let &[num_classes] = shape.as_slice() else {
            return Err(Error::Dimension(format!(
                "network must end in a flat class vector, ends in {shape:?}"
            )));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = kinds
            .into_iter()
            .map(|kind| {
                let params = kind.weight_shape().map(|ws| {
                    let bound = (1.0 / kind.fan_in() as f64).sqrt();
                    let mut draw = |shape: &[usize]| {
                        let n = shape.iter().product();
                        Tensor::from_vec(
                            shape.to_vec(),
                            (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
                        )
                        .expect("shape from layer kind")
                    };
                    let weight = draw(&ws);
                    let bias = draw(&[kind.bias_len()]);
                    Params {
                        mask: Tensor::ones(&ws),
                        weight,
                        bias,
                    }
                });
                Layer { kind, params }
            })
            .collect();
        Ok(Network {
            architecture,
            input_shape,
            num_classes,
            layers,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }

    /// Indices (into [`Network::layers`]) of layers that carry weights.
    pub fn parametric_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.params.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn params(&self, layer: usize) -> Result<&Params> {
        self.layers
            .get(layer)
            .and_then(|l| l.params.as_ref())
            .ok_or_else(|| Error::Argument(format!("layer {layer} is not a parametric layer")))
    }

    pub fn params_mut(&mut self, layer: usize) -> Result<&mut Params> {
        self.layers
            .get_mut(layer)
            .and_then(|l| l.params.as_mut())
            .ok_or_else(|| Error::Argument(format!("layer {layer} is not a parametric layer")))
    }

    pub fn num_weights(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(|p| p.weight.len())
            .sum()
    }

    /// Replaces a layer's mask and zeros the weights it removes.
    pub fn set_mask(&mut self, layer: usize, mask: Tensor) -> Result<()> {
        let p = self.params_mut(layer)?;
        p.weight.ensure_same_shape(&mask, "set_mask")?;
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Argument("mask entries must be 0 or 1".into()));
        }
        p.mask = mask;
        p.apply_mask();
        Ok(())
    }

    pub fn apply_masks(&mut self) {
        for p in self.layers.iter_mut().filter_map(|l| l.params.as_mut()) {
            p.apply_mask();
        }
    }

    /// Reinterprets a `[B, ...]` batch as `[B, input_shape...]`.
    fn shape_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let sample: usize = self.input_shape.iter().product();
        let b = batch.shape()[0];
        if batch.len() != b * sample {
            return Err(Error::Dimension(format!(
                "batch {:?} does not hold samples of shape {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&self.input_shape);
        batch.clone().reshape(shape)
    }

    fn layer_forward(kind: &LayerKind, params: Option<&Params>, x: &Tensor) -> Result<(Tensor, Cache)> {
        let b = x.shape()[0];
        Ok(match *kind {
            LayerKind::Dense { inputs, outputs } => {
                let p = params.expect("dense layers carry params");
                let mut y = vec![0.0; b * outputs];
                for row in y.chunks_exact_mut(outputs) {
                    row.copy_from_slice(p.bias.data());
                }
                gemm(
                    MatRef::new(x.data(), b, inputs),
                    MatRef::new(p.weight.data(), outputs, inputs).t(),
                    1.0,
                    &mut y,
                );
                (Tensor::from_vec(vec![b, outputs], y)?, Cache::Input(x.clone()))
            }
            LayerKind::Conv { .. } => {
                let p = params.expect("conv layers carry params");
                let y = conv2d_forward_batch(x, &p.weight, &p.bias)?;
                (y, Cache::Input(x.clone()))
            }
            LayerKind::MaxPool2 => {
                let (y, idx) = maxpool2x2(x)?;
                (y, Cache::Pool(idx))
            }
            LayerKind::Relu => (relu(x), Cache::Input(x.clone())),
            LayerKind::Flatten => {
                let rest = x.len() / b;
                (x.clone().reshape(vec![b, rest])?, Cache::None)
            }
        })
    }

    /// Logits `[B, classes]` for a batch of samples.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut x = self.shape_batch(batch)?;
        for layer in &self.layers {
            x = Self::layer_forward(&layer.kind, layer.params.as_ref(), &x)?.0;
        }
        Ok(x)
    }

    /// Mean cross-entropy over the batch and its gradient with respect to
    /// every parameter. Gradients at masked weights are exactly zero.
    pub fn backward(&self, batch: &Tensor, labels: &[usize]) -> Result<Gradients> {
        let mut x = self.shape_batch(batch)?;
        let batch_size = x.shape()[0];
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shapes.push(x.shape().to_vec());
            let (y, cache) = Self::layer_forward(&layer.kind, layer.params.as_ref(), &x)?;
            caches.push(cache);
            x = y;
        }
        let (loss, mut grad) = softmax_cross_entropy_batch(&x, labels)?;
        let correct = argmax_rows(&x)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();

        let mut layer_grads: Vec<Option<ParamGrads>> = vec![None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need_input_grad = i > 0;
            match (&layer.kind, &caches[i]) {
                (&LayerKind::Dense { inputs, outputs }, Cache::Input(input)) => {
                    let p = layer.params.as_ref().expect("dense params");
                    let mut gw = vec![0.0; outputs * inputs];
                    gemm(
                        MatRef::new(grad.data(), batch_size, outputs).t(),
                        MatRef::new(input.data(), batch_size, inputs),
                        0.0,
                        &mut gw,
                    );
                    let mut gb = vec![0.0; outputs];
                    for row in grad.data().chunks_exact(outputs) {
                        for (acc, g) in gb.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    let upstream = if need_input_grad {
                        let mut gx = vec![0.0; batch_size * inputs];
                        gemm(
                            MatRef::new(grad.data(), batch_size, outputs),
                            MatRef::new(p.weight.data(), outputs, inputs),
                            0.0,
                            &mut gx,
                        );
                        Some(Tensor::from_vec(vec![batch_size, inputs], gx)?)
                    } else {
                        None
                    };
                    let mut weight = Tensor::from_vec(vec![outputs, inputs], gw)?;
                    mask_gradient(&mut weight, &p.mask);
                    layer_grads[i] = Some(ParamGrads {
                        weight,
                        bias: Tensor::vector(gb),
                    });
                    if let Some(g) = upstream {
                        grad = g;
                    }
                }
                (LayerKind::Conv { .. }, Cache::Input(input)) => {
                    let p = layer.params.as_ref().expect("conv params");
                    let (gx, mut weight, bias) =
                        conv2d_backward_batch(input, &p.weight, &grad, need_input_grad)?;
                    mask_gradient(&mut weight, &p.mask);
                    layer_grads[i] = Some(ParamGrads { weight, bias });
                    if let Some(g) = gx {
                        grad = g;
                    }
                }
                (LayerKind::MaxPool2, Cache::Pool(idx)) => {
                    grad = maxpool2x2_backward(idx, &grad)?;
                }
                (LayerKind::Relu, Cache::Input(input)) => {
                    grad = relu_backward(input, &grad)?;
                }
                (LayerKind::Flatten, Cache::None) => {
                    grad = grad.reshape(shapes[i].clone())?;
                }
                _ => unreachable!("cache variant follows layer kind"),
            }
        }
        Ok(Gradients {
            loss,
            correct,
            layers: layer_grads,
        })
    }

    /// Fraction of samples classified correctly, evaluated in chunks.
    pub fn accuracy(&self, images: &Tensor, labels: &[usize], chunk: usize) -> Result<f64> {
        let n = labels.len();
        if n == 0 {
            return Ok(0.0);
        }
        let sample = images.len() / images.shape()[0];
        let mut correct = 0;
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let x = Tensor::from_vec(shape, images.data()[start * sample..end * sample].to_vec())?;
            let logits = self.forward(&x)?;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&labels[start..end])
                .filter(|(p, l)| p == l)
                .count();
        }
        Ok(correct as f64 / n as f64)
    }

    /// Flat parameter views in a fixed order: for each parametric layer,
    /// its weight then its bias.
    pub fn parameter_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(|l| l.params.as_mut())
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }
}

fn mask_gradient(grad: &mut Tensor, mask: &Tensor) {
    for (g, &m) in grad.data_mut().iter_mut().zip(mask.data()) {
        if m == 0.0 {
            *g = 0.0;
        }
    }
}

/// 784-300-100 multilayer perceptron.
pub fn build_lenet300100(seed: u64) -> Network {
    Network::new(
        Architecture::Lenet300100,
        vec![784],
        vec![
            LayerKind::Dense { inputs: 784, outputs: 300 },
            LayerKind::Relu,
            LayerKind::Dense { inputs: 300, outputs: 100 },
            LayerKind::Relu,
            LayerKind::Dense { inputs: 100, outputs: 10 },
        ],
        seed,
    )
    .expect("static architecture")
}

/// Two 5×5 conv layers (20 and 50 filters) with 2×2 max pooling, then
/// 800-500-10 fully connected.
pub fn build_lenet5(seed: u64) -> Network {
    Network::new(
        Architecture::Lenet5,
        vec![1, 28, 28],
        vec![
            LayerKind::Conv { in_channels: 1, out_channels: 20, kernel: 5 },
            LayerKind::MaxPool2,
            LayerKind::Relu,
            LayerKind::Conv { in_channels: 20, out_channels: 50, kernel: 5 },
            LayerKind::MaxPool2,
            LayerKind::Relu,
            LayerKind::Flatten,
            LayerKind::Dense { inputs: 800, outputs: 500 },
            LayerKind::Relu,
            LayerKind::Dense { inputs: 500, outputs: 10 },
        ],
        seed,
    )
    .expect("static architecture")
}

/// Partition of a layer's weight into filters/channels (conv) or
/// rows/columns (dense).
pub fn group_view(net: &Network, layer: usize, kind: GroupKind) -> Result<GroupScheme> {
    let l = net
        .layers()
        .get(layer)
        .ok_or_else(|| Error::Argument(format!("no layer {layer}")))?;
    let compatible = matches!(
        (&l.kind, kind),
        (LayerKind::Dense { .. }, GroupKind::FcRows | GroupKind::FcColumns)
            | (LayerKind::Conv { .. }, GroupKind::FilterWise | GroupKind::ChannelWise)
    );
    if !compatible {
        return Err(Error::Argument(format!(
            "{kind:?} grouping does not apply to layer {layer} ({:?})",
            l.kind
        )));
    }
    let shape = l.kind.weight_shape().expect("parametric");
    GroupScheme::for_weight_shape(kind, &shape)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub stage: String,
    /// Objective the weights were trained under.
    #[serde(default)]
    pub objective: String,
    /// Test accuracy of the dense model this one was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    architecture: Architecture,
    input_shape: Vec<usize>,
    layers: Vec<LayerRecord>,
    metadata: CheckpointMeta,
}

// `deny_unknown_fields` is incompatible with the flattened kind tag.
#[derive(Serialize, Deserialize)]
struct LayerRecord {
    #[serde(flatten)]
    kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<u8>>,
}

pub fn checkpoint_to_json(net: &Network, meta: &CheckpointMeta) -> Result<String> {
    let file = CheckpointFile {
        architecture: net.architecture,
        input_shape: net.input_shape.clone(),
        metadata: meta.clone(),
        layers: net
            .layers
            .iter()
            .map(|l| LayerRecord {
                kind: l.kind,
                weight_shape: l.params.as_ref().map(|p| p.weight.shape().to_vec()),
                weight: l.params.as_ref().map(|p| p.weight.data().to_vec()),
                bias: l.params.as_ref().map(|p| p.bias.data().to_vec()),
                mask: l
                    .params
                    .as_ref()
                    .map(|p| p.mask.data().iter().map(|&m| u8::from(m != 0.0)).collect()),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn checkpoint_from_json(json: &str) -> Result<(Network, CheckpointMeta)> {
    let file: CheckpointFile = serde_json::from_str(json)?;
    let mut net = Network::new(
        file.architecture,
        file.input_shape,
        file.layers.iter().map(|r| r.kind).collect(),
        0,
    )?;
    for (layer, record) in net.layers.iter_mut().zip(file.layers) {
        match (layer.params.as_mut(), record) {
            (
                Some(p),
                LayerRecord {
                    weight_shape: Some(shape),
                    weight: Some(w),
                    bias: Some(b),
                    mask: Some(m),
                    ..
                },
            ) => {
                if shape != p.weight.shape() {
                    return Err(Error::Dimension(format!(
                        "checkpoint weight shape {shape:?} disagrees with layer {:?}",
                        layer.kind
                    )));
                }
                if m.iter().any(|&v| v > 1) {
                    return Err(Error::Argument("checkpoint mask entries must be 0 or 1".into()));
                }
                p.weight = Tensor::from_vec(shape.clone(), w)?;
                p.bias = Tensor::from_vec(p.bias.shape().to_vec(), b)?;
                p.mask = Tensor::from_vec(shape, m.into_iter().map(f64::from).collect())?;
            }
            (None, LayerRecord { weight: None, bias: None, mask: None, .. }) => {}
            _ => {
                return Err(Error::Argument(format!(
                    "checkpoint parameters missing or unexpected for layer {:?}",
                    layer.kind
                )))
            }
        }
    }
    Ok((net, file.metadata))
}

pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_json(net, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_json(&json)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn lenet_weight_counts() {
        assert_eq!(build_lenet300100(0).num_weights(), 266_200);
        assert_eq!(build_lenet5(0).num_weights(), 430_500);
    }

    #[test]
    fn lenet5_shapes_flatten_to_800() {
        let net = build_lenet5(0);
        let mut shape = net.input_shape().to_vec();
        let mut trace = Vec::new();
        for kind in net.kinds() {
            shape = kind.output_shape(&shape).unwrap();
            trace.push(shape.clone());
        }
        assert_eq!(trace[0], vec![20, 24, 24]);
        assert_eq!(trace[1], vec![20, 12, 12]);
        assert_eq!(trace[3], vec![50, 8, 8]);
        assert_eq!(trace[4], vec![50, 4, 4]);
        assert_eq!(trace[6], vec![800]);
    }

    #[test]
    fn fresh_masks_are_ones() {
        let net = build_lenet5(1);
        for i in net.parametric_indices() {
            assert!(net.params(i).unwrap().mask.data().iter().all(|&m| m == 1.0));
        }
    }

    #[test]
    fn incompatible_chain_rejected() {
        let err = Network::new(
            Architecture::Custom,
            vec![4],
            vec![
                LayerKind::Dense { inputs: 4, outputs: 3 },
                LayerKind::Dense { inputs: 4, outputs: 2 },
            ],
            0,
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let mut net = build_lenet300100(3);
        for i in net.parametric_indices() {
            let p = net.params_mut(i).unwrap();
            p.weight = Tensor::zeros(p.weight.shape());
            p.bias = Tensor::zeros(p.bias.shape());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_batch(&mut rng, &[3, 1, 28, 28]);
        let g = net.backward(&x, &[0, 4, 9]).unwrap();
        assert!((g.loss - 10f64.ln()).abs() < 1e-12);
        assert!(net.forward(&x).unwrap().data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn masked_weights_get_zero_gradient() {
        let mut net = build_lenet300100(4);
        let mut mask = Tensor::ones(&[300, 784]);
        mask.data_mut()[12_345] = 0.0;
        net.set_mask(0, mask).unwrap();
        assert_eq!(net.params(0).unwrap().weight.data()[12_345], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_batch(&mut rng, &[4, 784]);
        let g = net.backward(&x, &[1, 2, 3, 4]).unwrap();
        let gw = &g.layers[0].as_ref().unwrap().weight;
        assert_eq!(gw.data()[12_345], 0.0);
        assert!(gw.data().iter().filter(|&&v| v != 0.0).count() > 1000);
    }

    #[test]
    fn mask_application_is_idempotent() {
        let mut net = build_lenet300100(5);
        let mut mask = Tensor::ones(&[100, 300]);
        for i in (0..30_000).step_by(7) {
            mask.data_mut()[i] = 0.0;
        }
        net.set_mask(2, mask).unwrap();
        let once = net.clone();
        net.apply_masks();
        assert_eq!(net, once);
    }

    /// Central differences of the mean loss at probed weights.
    fn check_network(net: &mut Network, x: &Tensor, labels: &[usize], probes: usize, seed: u64) {
        let h = 1e-6;
        let grads = net.backward(x, labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = net.parametric_indices();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..probes {
            let layer = params[rng.random_range(0..params.len())];
            let j = rng.random_range(0..net.params(layer).unwrap().weight.len());
            let orig = net.params(layer).unwrap().weight.data()[j];
            net.params_mut(layer).unwrap().weight.data_mut()[j] = orig + h;
            let fp = net.backward(x, labels).unwrap().loss;
            net.params_mut(layer).unwrap().weight.data_mut()[j] = orig - h;
            let fm = net.backward(x, labels).unwrap().loss;
            net.params_mut(layer).unwrap().weight.data_mut()[j] = orig;
            numeric.push((fp - fm) / (2.0 * h));
            analytic.push(grads.layers[layer].as_ref().unwrap().weight.data()[j]);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = Tensor::vector(analytic).l2_norm().max(Tensor::vector(numeric).l2_norm());
        assert!(diff / scale <= 1e-5, "relative error {:e}", diff / scale);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut net = build_lenet300100(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_batch(&mut rng, &[4, 784]);
        check_network(&mut net, &x, &[3, 1, 4, 1], 20, 7);
    }

    #[test]
    fn cnn_gradient_matches_finite_differences() {
        let mut net = build_lenet5(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_batch(&mut rng, &[4, 1, 28, 28]);
        check_network(&mut net, &x, &[5, 9, 2, 6], 20, 9);
    }

    #[test]
    fn group_views() {
        let mlp = build_lenet300100(0);
        let rows = group_view(&mlp, 0, GroupKind::FcRows).unwrap();
        assert_eq!(rows.groups().len(), 300);
        assert!(rows.groups().iter().all(|g| g.len() == 784));
        assert_eq!(group_view(&mlp, 0, GroupKind::FcColumns).unwrap().groups().len(), 784);
        assert!(matches!(group_view(&mlp, 1, GroupKind::FcRows), Err(Error::Argument(_))));
        assert!(matches!(group_view(&mlp, 0, GroupKind::FilterWise), Err(Error::Argument(_))));

        let cnn = build_lenet5(0);
        let filters = group_view(&cnn, 3, GroupKind::FilterWise).unwrap();
        assert_eq!(filters.groups().len(), 50);
        assert!(filters.groups().iter().all(|g| g.len() == 500));
    }

    #[test]
    fn group_norms_partition_total_energy() {
        let cnn = build_lenet5(2);
        for (layer, kinds) in [
            (0, [GroupKind::FilterWise, GroupKind::ChannelWise]),
            (3, [GroupKind::FilterWise, GroupKind::ChannelWise]),
            (7, [GroupKind::FcRows, GroupKind::FcColumns]),
        ] {
            let w = &cnn.params(layer).unwrap().weight;
            for kind in kinds {
                let scheme = group_view(&cnn, layer, kind).unwrap();
                let total: f64 = scheme.group_norms(w.data()).iter().map(|n| n * n).sum();
                assert!((total - w.sum_of_squares()).abs() <= 1e-12 * w.sum_of_squares());
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut net = build_lenet5(11);
        let mut mask = Tensor::ones(&[50, 20, 5, 5]);
        mask.data_mut()[..100].fill(0.0);
        net.set_mask(3, mask).unwrap();
        let meta = CheckpointMeta {
            seed: 11,
            epoch: 3,
            accuracy: Some(0.987),
            stage: "pretrain".into(),
            objective: String::new(),
            baseline_accuracy: None,
        };
        let json = checkpoint_to_json(&net, &meta).unwrap();
        let (back, meta_back) = checkpoint_from_json(&json).unwrap();
        assert_eq!(meta_back, meta);
        for (a, b) in net.layers().iter().zip(back.layers()) {
            assert_eq!(a.kind, b.kind);
            if let (Some(pa), Some(pb)) = (&a.params, &b.params) {
                let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&pa.weight), bits(&pb.weight));
                assert_eq!(bits(&pa.bias), bits(&pb.bias));
                assert_eq!(pa.mask, pb.mask);
            }
        }
        assert_eq!(checkpoint_to_json(&back, &meta_back).unwrap(), json);
    }

    #[test]
    fn checkpoint_rejects_unknown_fields() {
        let json = checkpoint_to_json(&build_lenet300100(0), &CheckpointMeta::default()).unwrap();
        let tampered = json.replacen("{", "{\"bogus\":1,", 1);
        assert!(checkpoint_from_json(&tampered).is_err());
    }
}

//! Threshold pruning and masked finetuning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{group_view, Network};
use crate::numerics::Tensor;
use crate::regularizers::RegularizerKind;
use crate::optim::{
    train_epochs, GroupAxis, ObjectiveSpec, OptimizerKind, OptimizerState, TrainConfig, TrainingLog,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdMode {
    /// `ratio · std(W)` with the centered population standard deviation.
    RatioOfStd { ratio: f64 },
    Absolute { value: f64 },
}

impl ThresholdMode {
    fn validate(&self) -> Result<()> {
        match *self {
            ThresholdMode::RatioOfStd { ratio } if !(ratio >= 0.0) => {
                Err(Error::Config(format!("threshold ratio must be >= 0, got {ratio}")))
            }
            ThresholdMode::Absolute { value } if !(value >= 0.0) => {
                Err(Error::Config(format!("absolute threshold must be >= 0, got {value}")))
            }
            _ => Ok(()),
        }
    }
}

/// A default threshold rule with optional per-layer overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdRule {
    pub default: ThresholdMode,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layers: BTreeMap<usize, ThresholdMode>,
}

impl ThresholdRule {
    pub fn uniform(mode: ThresholdMode) -> Self {
        ThresholdRule {
            default: mode,
            layers: BTreeMap::new(),
        }
    }

    pub fn ratio(ratio: f64) -> Self {
        Self::uniform(ThresholdMode::RatioOfStd { ratio })
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        self.default.validate()?;
        for (&layer, mode) in &self.layers {
            mode.validate()?;
            if net.params(layer).is_err() {
                return Err(Error::Config(format!(
                    "threshold override for layer {layer}, which is not parametric"
                )));
            }
        }
        Ok(())
    }
}

/// Centered population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Threshold τ for every parametric layer, keyed by layer index.
pub fn compute_thresholds(net: &Network, rule: &ThresholdRule) -> Result<BTreeMap<usize, f64>> {
    rule.validate(net)?;
    net.parametric_indices()
        .into_iter()
        .map(|l| {
            let tau = match rule.layers.get(&l).unwrap_or(&rule.default) {
                ThresholdMode::RatioOfStd { ratio } => ratio * population_std(net.params(l)?.weight.data()),
                ThresholdMode::Absolute { value } => *value,
            };
            Ok((l, tau))
        })
        .collect()
}

fn layer_threshold(thresholds: &BTreeMap<usize, f64>, layer: usize) -> Result<f64> {
    thresholds
        .get(&layer)
        .copied()
        .ok_or_else(|| Error::Argument(format!("no threshold for layer {layer}")))
}

/// Masks every weight with `|w| < τ` (ties survive), on top of any
/// existing mask.
pub fn prune_elementwise(net: &mut Network, thresholds: &BTreeMap<usize, f64>) -> Result<()> {
    for layer in net.parametric_indices() {
        let tau = layer_threshold(thresholds, layer)?;
        let p = net.params(layer)?;
        let mask: Vec<f64> = p
            .weight
            .data()
            .iter()
            .zip(p.mask.data())
            .map(|(&w, &m)| if m != 0.0 && !(w.abs() < tau) { 1.0 } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(p.weight.shape().to_vec(), mask)?;
        net.set_mask(layer, mask)?;
    }
    Ok(())
}

/// Masks whole groups whose ℓ2 norm is below τ. A weight survives only if
/// every grouping keeps it.
pub fn prune_structural(
    net: &mut Network,
    thresholds: &BTreeMap<usize, f64>,
    axes: &[GroupAxis],
) -> Result<()> {
    for layer in net.parametric_indices() {
        let tau = layer_threshold(thresholds, layer)?;
        let kind = net.layers()[layer].kind;
        let p = net.params(layer)?;
        let mut mask = p.mask.clone();
        for axis in axes {
            let scheme = group_view(net, layer, axis.group_kind(&kind))?;
            let norms = scheme.group_norms(p.weight.data());
            for (group, norm) in scheme.groups().iter().zip(norms) {
                if norm < tau {
                    for &i in group {
                        mask.data_mut()[i] = 0.0;
                    }
                }
            }
        }
        net.set_mask(layer, mask)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    /// Individual weights below τ.
    Elementwise,
    /// Whole rows/columns (filters/channels) with group norm below τ.
    Groups,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub method: PruneMethod,
    pub threshold: ThresholdRule,
    /// Groupings used by [`PruneMethod::Groups`].
    #[serde(default = "both_axes")]
    pub axes: Vec<GroupAxis>,
}

fn both_axes() -> Vec<GroupAxis> {
    vec![GroupAxis::Output, GroupAxis::Input]
}

impl PruneConfig {
    pub fn elementwise(threshold: ThresholdRule) -> Self {
        PruneConfig {
            method: PruneMethod::Elementwise,
            threshold,
            axes: both_axes(),
        }
    }
}

/// Computes thresholds and prunes; returns the thresholds used.
pub fn prune(net: &mut Network, config: &PruneConfig) -> Result<BTreeMap<usize, f64>> {
    let thresholds = compute_thresholds(net, &config.threshold)?;
    match config.method {
        PruneMethod::Elementwise => prune_elementwise(net, &thresholds)?,
        PruneMethod::Groups => prune_structural(net, &thresholds, &config.axes)?,
    }
    Ok(thresholds)
}

/// Masked training without sparsity penalties (an ℓ2 term is allowed). Pruned weights stay exactly
/// zero and the best-test-accuracy snapshot is kept.
pub fn finetune(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    objective: &ObjectiveSpec,
    optimizer: OptimizerKind,
    config: &TrainConfig,
) -> Result<TrainingLog> {
    if let Some(t) = objective.terms.iter().find(|t| t.kind != RegularizerKind::L2) {
        return Err(Error::Config(format!(
            "finetuning objective may only hold l2 terms, found {}",
            t.kind.name()
        )));
    }
    let resolved = objective.resolve(net)?;
    let mut opt = OptimizerState::new(optimizer);
    let config = TrainConfig {
        keep_best: true,
        ..config.clone()
    };
    train_epochs(net, train, test, &resolved, &mut opt, &config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::metrics::{count_nonzero, surviving_structure};
    use crate::model::{build_lenet300100, Architecture, LayerKind};

    fn dense(weight: Vec<f64>, outputs: usize, inputs: usize) -> Network {
        let mut net = Network::new(
            Architecture::Custom,
            vec![inputs],
            vec![LayerKind::Dense { inputs, outputs }],
            0,
        )
        .unwrap();
        net.params_mut(0).unwrap().weight = Tensor::matrix(outputs, inputs, weight).unwrap();
        net
    }

    fn taus(tau: f64) -> BTreeMap<usize, f64> {
        BTreeMap::from([(0, tau)])
    }

    #[test]
    fn threshold_examples() {
        let net = dense(vec![-1.0, 1.0, -1.0, 1.0], 2, 2);
        assert_eq!(compute_thresholds(&net, &ThresholdRule::ratio(0.5)).unwrap()[&0], 0.5);
        assert_eq!(compute_thresholds(&net, &ThresholdRule::ratio(0.0)).unwrap()[&0], 0.0);
        let abs = ThresholdRule::uniform(ThresholdMode::Absolute { value: 1e-4 });
        assert_eq!(compute_thresholds(&net, &abs).unwrap()[&0], 1e-4);
        assert!(compute_thresholds(&net, &ThresholdRule::ratio(-1.0)).is_err());
        let mut over = ThresholdRule::ratio(0.1);
        over.layers.insert(3, ThresholdMode::Absolute { value: 1.0 });
        assert!(compute_thresholds(&net, &over).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut net = dense(vec![0.1, -0.5, 0.9], 1, 3);
        prune_elementwise(&mut net, &taus(0.4)).unwrap();
        assert_eq!(net.params(0).unwrap().mask.data(), &[0.0, 1.0, 1.0]);
        assert_eq!(net.params(0).unwrap().weight.data(), &[0.0, -0.5, 0.9]);

        let mut net = dense(vec![0.1, -0.5, 0.9], 1, 3);
        prune_elementwise(&mut net, &taus(0.0)).unwrap();
        assert!(net.params(0).unwrap().mask.data().iter().all(|&m| m == 1.0));

        // ties survive
        let mut net = dense(vec![0.5, -0.5, 0.49], 1, 3);
        prune_elementwise(&mut net, &taus(0.5)).unwrap();
        assert_eq!(net.params(0).unwrap().mask.data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn infinite_threshold_gives_uniform_logits() {
        let mut net = build_lenet300100(1);
        let all: BTreeMap<usize, f64> = net.parametric_indices().into_iter().map(|l| (l, f64::INFINITY)).collect();
        prune_elementwise(&mut net, &all).unwrap();
        for l in net.parametric_indices() {
            net.params_mut(l).unwrap().bias.data_mut().fill(0.0);
        }
        assert!(count_nonzero(&net).iter().all(|l| l.nonzero == 0));
        let logits = net.forward(&Tensor::ones(&[1, 784])).unwrap();
        assert!(logits.data().iter().all(|&z| z == logits.data()[0]));
    }

    #[test]
    fn survivors_clear_threshold_and_pruning_is_idempotent() {
        let mut net = build_lenet300100(2);
        let thresholds = prune(&mut net, &PruneConfig::elementwise(ThresholdRule::ratio(0.7))).unwrap();
        for (&l, &tau) in &thresholds {
            assert!(net.params(l).unwrap().weight.data().iter().all(|&w| w == 0.0 || w.abs() >= tau));
        }
        let once = net.clone();
        prune_elementwise(&mut net, &thresholds).unwrap();
        assert_eq!(net, once);
    }

    #[test]
    fn structural_examples() {
        let mut net = dense(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0], 2, 3);
        prune_structural(&mut net, &taus(1e-4), &[GroupAxis::Output]).unwrap();
        assert_eq!(surviving_structure(&net), vec![3]);
        assert_eq!(net.params(0).unwrap().mask.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);

        let mut net = dense(vec![3.0, 4.0, 1e-10, 0.0], 2, 2);
        prune_structural(&mut net, &taus(1e-4), &[GroupAxis::Output]).unwrap();
        assert_eq!(net.params(0).unwrap().mask.data(), &[1.0, 1.0, 0.0, 0.0]);

        let mut net = dense(vec![3.0, 4.0, 1.0, 1.0], 2, 2);
        let before = net.clone();
        prune_structural(&mut net, &taus(1e-4), &both_axes()).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn structural_masks_are_whole_groups() {
        let mut net = build_lenet300100(3);
        // shrink some rows and columns so they fall under the threshold
        let w = net.params_mut(0).unwrap().weight.data_mut();
        for r in [1usize, 7, 50] {
            w[r * 784..(r + 1) * 784].iter_mut().for_each(|v| *v *= 1e-3);
        }
        for c in [3usize, 300] {
            (0..300).for_each(|r| w[r * 784 + c] *= 1e-3);
        }
        let thresholds: BTreeMap<usize, f64> =
            net.parametric_indices().into_iter().map(|l| (l, 1e-2)).collect();
        prune_structural(&mut net, &thresholds, &both_axes()).unwrap();
        let mask = &net.params(0).unwrap().mask;
        for r in 0..300 {
            let row = &mask.data()[r * 784..(r + 1) * 784];
            let dead_cols = [3usize, 300];
            let partial = row
                .iter()
                .enumerate()
                .any(|(c, &m)| !dead_cols.contains(&c) && m != row[0]);
            assert!(!partial, "row {r} partially masked");
        }
        assert_eq!(surviving_structure(&net), vec![782, 297, 100]);
    }

    #[test]
    fn finetune_keeps_zeros_and_rejects_hoyer_terms() {
        let (train, test) = synthetic_blobs(250, 3, 1).unwrap().split_at(200);
        let mut net = build_lenet300100(5);
        prune(&mut net, &PruneConfig::elementwise(ThresholdRule::ratio(1.0))).unwrap();
        let before = count_nonzero(&net);
        let cfg = TrainConfig::new(2, 32, 1);
        finetune(&mut net, &train, &test, &ObjectiveSpec::data_only(), OptimizerKind::adam(1e-3), &cfg).unwrap();
        assert_eq!(count_nonzero(&net), before);

        let hs = ObjectiveSpec::elementwise(RegularizerKind::HoyerSquare, 1e-4, 0.0);
        assert!(matches!(
            finetune(&mut net, &train, &test, &hs, OptimizerKind::adam(1e-3), &cfg),
            Err(Error::Config(_))
        ));

        let snapshot = net.clone();
        finetune(&mut net, &train, &test, &ObjectiveSpec::data_only(), OptimizerKind::adam(1e-3), &TrainConfig::new(0, 32, 1))
            .unwrap();
        assert_eq!(net, snapshot);
    }
}

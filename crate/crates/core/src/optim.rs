//! Optimizers, composite objectives and the epoch loop.
//!
//! A composite objective is the mean cross-entropy plus, per targeted
//! layer, `decay · R(W)` for each penalty term. An element-wise objective
//! uses one Hoyer-Square term (and optionally ℓ2); a structural objective
//! uses two Group-HS terms, one over filters/rows and one over
//! channels/columns.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{group_view, Gradients, LayerKind, Network};
use crate::numerics::Tensor;
use crate::regularizers::{GroupKind, RegularizerKind, RegularizerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment buffers paired with one network's parameter list.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    steps: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter from its gradient.
    ///
    /// SGD: `v ← μv + g; w ← w − lr·v`. Adam: bias-corrected moments with
    /// `w ← w − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            p.ensure_same_shape(g, "optimizer step")?;
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(b, p)| b.shape() != p.shape())
        {
            return Err(Error::Dimension(
                "parameter shapes changed since the optimizer was created".into(),
            ));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { lr, momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &g), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Which group family a Group-HS term uses on each layer: filters (conv) or
/// rows (dense) for `Output`, channels or columns for `Input`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAxis {
    Output,
    Input,
}

impl GroupAxis {
    pub fn group_kind(self, layer: &LayerKind) -> GroupKind {
        match (self, layer) {
            (GroupAxis::Output, LayerKind::Conv { .. }) => GroupKind::FilterWise,
            (GroupAxis::Input, LayerKind::Conv { .. }) => GroupKind::ChannelWise,
            (GroupAxis::Output, _) => GroupKind::FcRows,
            (GroupAxis::Input, _) => GroupKind::FcColumns,
        }
    }

    fn label(self) -> &'static str {
        match self {
            GroupAxis::Output => "out",
            GroupAxis::Input => "in",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyTerm {
    pub kind: RegularizerKind,
    pub decay: f64,
    /// Transformed-ℓ1 shape parameter; defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tl1_a: Option<f64>,
    /// Required for Group-HS, forbidden otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<GroupAxis>,
    /// Layer indices; all parametric layers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
}

impl PenaltyTerm {
    pub fn new(kind: RegularizerKind, decay: f64) -> Self {
        PenaltyTerm {
            kind,
            decay,
            tl1_a: None,
            groups: None,
            layers: None,
        }
    }

    pub fn group_hs(axis: GroupAxis, decay: f64) -> Self {
        PenaltyTerm {
            groups: Some(axis),
            ..PenaltyTerm::new(RegularizerKind::GroupHs, decay)
        }
    }

    pub fn name(&self) -> String {
        match self.groups {
            Some(axis) => format!("{}_{}", self.kind.name(), axis.label()),
            None => self.kind.name().to_string(),
        }
    }
}

/// List of penalty terms added to the data loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectiveSpec {
    pub terms: Vec<PenaltyTerm>,
}

impl ObjectiveSpec {
    pub fn data_only() -> Self {
        ObjectiveSpec::default()
    }

    /// `L + Σ_l (α·R(W_l) + β·‖W_l‖₂)`; zero-decay terms are omitted.
    pub fn elementwise(kind: RegularizerKind, alpha: f64, beta: f64) -> Self {
        let mut terms = vec![PenaltyTerm::new(kind, alpha)];
        if beta > 0.0 {
            terms.push(PenaltyTerm::new(RegularizerKind::L2, beta));
        }
        ObjectiveSpec { terms }
    }

    /// `L + Σ_l (α_n·G_H(filters/rows) + α_c·G_H(channels/columns) + β·‖W_l‖₂)`.
    pub fn structural(alpha_n: f64, alpha_c: f64, beta: f64) -> Self {
        let mut terms = vec![
            PenaltyTerm::group_hs(GroupAxis::Output, alpha_n),
            PenaltyTerm::group_hs(GroupAxis::Input, alpha_c),
        ];
        if beta > 0.0 {
            terms.push(PenaltyTerm::new(RegularizerKind::L2, beta));
        }
        ObjectiveSpec { terms }
    }

    /// Checks every term against the network and builds the per-layer
    /// regularizers (group schemes included).
    pub fn resolve(&self, net: &Network) -> Result<ResolvedObjective> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            match (term.kind, term.groups) {
                (RegularizerKind::GroupHs, None) => {
                    return Err(Error::Config("group_hs term needs a `groups` axis".into()))
                }
                (k, Some(_)) if k != RegularizerKind::GroupHs => {
                    return Err(Error::Config(format!("{} term cannot take `groups`", k.name())))
                }
                _ => {}
            }
            if term.tl1_a.is_some() && term.kind != RegularizerKind::TransformedL1 {
                return Err(Error::Config(format!("{} term cannot take `tl1_a`", term.kind.name())));
            }
            let layers = match &term.layers {
                Some(ls) => ls.clone(),
                None => net.parametric_indices(),
            };
            let mut per_layer = Vec::with_capacity(layers.len());
            for &layer in &layers {
                let kind = net
                    .layers()
                    .get(layer)
                    .filter(|l| l.kind.is_parametric())
                    .ok_or_else(|| {
                        Error::Config(format!("penalty targets layer {layer}, which is not parametric"))
                    })?
                    .kind;
                let spec = match term.kind {
                    RegularizerKind::GroupHs => {
                        let axis = term.groups.expect("checked above");
                        RegularizerSpec::group_hs(group_view(net, layer, axis.group_kind(&kind))?, term.decay)
                    }
                    RegularizerKind::TransformedL1 => RegularizerSpec::transformed_l1(
                        term.tl1_a.unwrap_or(crate::regularizers::DEFAULT_TL1_A),
                        term.decay,
                    ),
                    k => RegularizerSpec::new(k, term.decay),
                }
                .map_err(|e| Error::Config(e.to_string()))?;
                per_layer.push((layer, spec));
            }
            terms.push(ResolvedTerm {
                name: term.name(),
                layers: per_layer,
            });
        }
        Ok(ResolvedObjective { terms })
    }

    pub fn describe(&self) -> String {
        if self.terms.is_empty() {
            return "cross_entropy".into();
        }
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|t| format!("{}*{}", t.decay, t.name()))
            .collect();
        format!("cross_entropy + {}", parts.join(" + "))
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedTerm {
    pub name: String,
    pub layers: Vec<(usize, RegularizerSpec)>,
}

/// An [`ObjectiveSpec`] bound to a concrete network.
#[derive(Debug, Clone, Default)]
pub struct ResolvedObjective {
    pub terms: Vec<ResolvedTerm>,
}

impl ResolvedObjective {
    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name.clone()).collect()
    }

    /// Undecayed penalty value of each term, summed over its layers.
    pub fn penalty_values(&self, net: &Network) -> Result<Vec<f64>> {
        self.terms
            .iter()
            .map(|t| {
                t.layers
                    .iter()
                    .map(|(l, spec)| spec.value(&net.params(*l)?.weight))
                    .sum()
            })
            .collect()
    }

    /// `Σ decay · value` over all terms and layers.
    pub fn penalty_total(&self, net: &Network) -> Result<f64> {
        let mut total = 0.0;
        for t in &self.terms {
            for (l, spec) in &t.layers {
                total += spec.decay() * spec.value(&net.params(*l)?.weight)?;
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone)]
pub struct CompositeGradient {
    pub data_loss: f64,
    /// Undecayed value per objective term, for logging.
    pub penalties: Vec<f64>,
    pub grads: Gradients,
}

/// Gradient of data loss plus decayed penalties. With `batch = None` the
/// data term is dropped and only the penalties contribute.
pub fn composite_gradient(
    net: &Network,
    batch: Option<(&Tensor, &[usize])>,
    objective: &ResolvedObjective,
) -> Result<CompositeGradient> {
    let mut grads = match batch {
        Some((x, y)) => net.backward(x, y)?,
        None => Gradients::zeros_like(net),
    };
    let mut penalties = Vec::with_capacity(objective.terms.len());
    let mut scratch = Vec::new();
    for term in &objective.terms {
        let mut value = 0.0;
        for (layer, spec) in &term.layers {
            let params = net.params(*layer)?;
            value += spec.value(&params.weight)?;
            if spec.decay() == 0.0 {
                continue;
            }
            scratch.resize(params.weight.len(), 0.0);
            spec.gradient_into(&params.weight, &mut scratch)?;
            let gw = &mut grads.layers[*layer]
                .as_mut()
                .expect("parametric layer has gradients")
                .weight;
            for ((g, &r), &m) in gw.data_mut().iter_mut().zip(&scratch).zip(params.mask.data()) {
                if m != 0.0 {
                    *g += spec.decay() * r;
                }
            }
        }
        penalties.push(value);
    }
    Ok(CompositeGradient {
        data_loss: grads.loss,
        penalties,
        grads,
    })
}

/// Full objective value `L + Σ decay·R`, the scalar whose gradient
/// [`composite_gradient`] returns.
pub fn objective_value(
    net: &Network,
    batch: Option<(&Tensor, &[usize])>,
    objective: &ResolvedObjective,
) -> Result<f64> {
    let data = match batch {
        Some((x, y)) => crate::numerics::softmax_cross_entropy_batch(&net.forward(x)?, y)?.0,
        None => 0.0,
    };
    Ok(data + objective.penalty_total(net)?)
}

/// Applies one optimizer step from a composite gradient, then re-applies
/// masks so pruned weights stay exactly zero.
pub fn apply_step(net: &mut Network, grads: &Gradients, optimizer: &mut OptimizerState) -> Result<()> {
    let grad_refs: Vec<&Tensor> = grads
        .layers
        .iter()
        .flatten()
        .flat_map(|g| [&g.weight, &g.bias])
        .collect();
    let mut params = net.parameter_tensors_mut();
    optimizer.step(&mut params, &grad_refs)?;
    net.apply_masks();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Restore the epoch with the best test accuracy when done.
    #[serde(default)]
    pub keep_best: bool,
    /// Stop after this many epochs without a new best test accuracy.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub verbose: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            seed,
            keep_best: false,
            patience: None,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub data_loss: f64,
    pub penalties: Vec<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub nonzero_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub penalty_names: Vec<String>,
    pub records: Vec<EpochRecord>,
    /// Epoch (1-based) and accuracy of the best test result, if any epoch ran.
    pub best: Option<(usize, f64)>,
}

impl TrainingLog {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_acc)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string(), "data_loss".to_string()];
        header.extend(self.penalty_names.iter().cloned());
        header.extend(["train_acc", "test_acc", "nonzero_fraction"].map(String::from));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.epoch.to_string(), r.data_loss.to_string()];
            row.extend(r.penalties.iter().map(f64::to_string));
            row.extend([r.train_acc, r.test_acc, r.nonzero_fraction].map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

pub fn nonzero_fraction(net: &Network) -> f64 {
    let (nz, total) = net
        .layers()
        .iter()
        .filter_map(|l| l.params.as_ref())
        .fold((0, 0), |(nz, t), p| (nz + p.weight.count_nonzero(), t + p.weight.len()));
    nz as f64 / total as f64
}

const EVAL_CHUNK: usize = 1000;

/// Mini-batch training for `config.epochs` epochs over a seeded shuffle,
/// logging loss, penalties and accuracies after each epoch.
pub fn train_epochs(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    objective: &ResolvedObjective,
    optimizer: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<TrainingLog> {
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog {
        penalty_names: objective.term_names(),
        ..TrainingLog::default()
    };
    let mut best_net: Option<Network> = None;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = train.gather(chunk);
            let step = composite_gradient(net, Some((&x, &y)), objective)?;
            loss_sum += step.data_loss * chunk.len() as f64;
            correct += step.grads.correct;
            apply_step(net, &step.grads, optimizer)?;
        }
        let record = EpochRecord {
            epoch,
            data_loss: loss_sum / train.len() as f64,
            penalties: objective.penalty_values(net)?,
            train_acc: correct as f64 / train.len() as f64,
            test_acc: net.accuracy(test.images(), test.labels(), EVAL_CHUNK)?,
            nonzero_fraction: nonzero_fraction(net),
        };
        if config.verbose {
            eprintln!(
                "epoch {:>3}  loss {:.5}  train {:.4}  test {:.4}  nonzero {:.4}  penalties {:?}",
                record.epoch,
                record.data_loss,
                record.train_acc,
                record.test_acc,
                record.nonzero_fraction,
                record.penalties
            );
        }
        let improved = log.best.is_none_or(|(_, acc)| record.test_acc > acc);
        if improved {
            log.best = Some((epoch, record.test_acc));
            since_best = 0;
            if config.keep_best {
                best_net = Some(net.clone());
            }
        } else {
            since_best += 1;
        }
        log.records.push(record);
        if config.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    if let Some(best) = best_net {
        *net = best;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::model::{build_lenet300100, Architecture};
    use rand::Rng;

    #[test]
    fn sgd_examples() {
        let mut w = Tensor::vector(vec![1.0]);
        let g = Tensor::vector(vec![0.25]);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { lr: 1.0, momentum: 0.0 });
        opt.step(&mut [&mut w], &[&g]).unwrap();
        assert_eq!(w.data(), &[0.75]);
        opt.step(&mut [&mut w], &[&Tensor::vector(vec![0.0])]).unwrap();
        assert_eq!(w.data(), &[0.75]);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut w = Tensor::vector(vec![0.0]);
        let g = Tensor::vector(vec![1.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { lr: 0.1, momentum: 0.5 });
        opt.step(&mut [&mut w], &[&g]).unwrap();
        opt.step(&mut [&mut w], &[&g]).unwrap();
        // v1 = 1, v2 = 1.5
        assert!((w.data()[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m̂ = g and v̂ = g² after one step, so the move is lr·g/(|g| + ε).
        for g in [0.3, -2.0, 1e-4] {
            let mut w = Tensor::vector(vec![1.0]);
            let mut opt = OptimizerState::new(OptimizerKind::adam(1e-3));
            opt.step(&mut [&mut w], &[&Tensor::vector(vec![g])]).unwrap();
            let expected = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((w.data()[0] - expected).abs() < 1e-15, "g={g}");
        }
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        let mut opt = OptimizerState::new(OptimizerKind::adam(1e-3));
        assert!(opt.step(&mut [&mut w], &[&Tensor::vector(vec![1.0])]).is_err());
        assert!(opt.step(&mut [&mut w], &[]).is_err());
    }

    fn random_batch(seed: u64, n: usize) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(vec![n, 784], (0..n * 784).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let y = (0..n).map(|_| rng.random_range(0..10)).collect();
        (x, y)
    }

    #[test]
    fn zero_decay_matches_backward() {
        let net = build_lenet300100(1);
        let (x, y) = random_batch(2, 8);
        let objective = ObjectiveSpec::elementwise(RegularizerKind::HoyerSquare, 0.0, 0.0)
            .resolve(&net)
            .unwrap();
        let c = composite_gradient(&net, Some((&x, &y)), &objective).unwrap();
        let b = net.backward(&x, &y).unwrap();
        for (a, b) in c.grads.layers.iter().zip(&b.layers) {
            assert_eq!(a, b);
        }
        assert_eq!(c.data_loss, b.loss);
    }

    #[test]
    fn penalty_only_gradient_is_regularizer_gradient() {
        let net = build_lenet300100(3);
        let objective = ObjectiveSpec::elementwise(RegularizerKind::HoyerSquare, 1.0, 0.0)
            .resolve(&net)
            .unwrap();
        let c = composite_gradient(&net, None, &objective).unwrap();
        assert_eq!(c.data_loss, 0.0);
        for l in net.parametric_indices() {
            let expected = RegularizerSpec::new(RegularizerKind::HoyerSquare, 1.0)
                .unwrap()
                .gradient(&net.params(l).unwrap().weight)
                .unwrap();
            let got = c.grads.layers[l].as_ref().unwrap();
            assert_eq!(got.weight, expected);
            assert!(got.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn structural_penalty_sums_independent_calls() {
        let net = Network::new(
            Architecture::Custom,
            vec![6],
            vec![LayerKind::Dense { inputs: 6, outputs: 4 }],
            9,
        )
        .unwrap();
        let (alpha, beta) = (0.3, 0.05);
        let objective = ObjectiveSpec::structural(alpha, alpha, beta).resolve(&net).unwrap();
        let w = &net.params(0).unwrap().weight;
        let rows = RegularizerSpec::group_hs(group_view(&net, 0, GroupKind::FcRows).unwrap(), 1.0).unwrap();
        let cols = RegularizerSpec::group_hs(group_view(&net, 0, GroupKind::FcColumns).unwrap(), 1.0).unwrap();
        let expected = alpha * (rows.value(w).unwrap() + cols.value(w).unwrap()) + beta * w.l2_norm();
        let got = objective.penalty_total(&net).unwrap();
        assert!((got - expected).abs() <= 1e-14 * expected);
    }

    #[test]
    fn resolve_validates_terms() {
        let net = build_lenet300100(0);
        let bad = |t: PenaltyTerm| ObjectiveSpec { terms: vec![t] }.resolve(&net).is_err();
        assert!(bad(PenaltyTerm::new(RegularizerKind::GroupHs, 1.0)));
        assert!(bad(PenaltyTerm {
            groups: Some(GroupAxis::Input),
            ..PenaltyTerm::new(RegularizerKind::L1, 1.0)
        }));
        assert!(bad(PenaltyTerm {
            layers: Some(vec![1]),
            ..PenaltyTerm::new(RegularizerKind::L1, 1.0)
        }));
        assert!(bad(PenaltyTerm::new(RegularizerKind::L1, -1.0)));
        assert!(bad(PenaltyTerm {
            tl1_a: Some(2.0),
            ..PenaltyTerm::new(RegularizerKind::L1, 1.0)
        }));
    }

    /// `(F(W+hd) − F(W−hd)) / 2h` against `<∇F, d>` for the full objective.
    fn directional_check(objective: ObjectiveSpec, seed: u64) {
        let mut net = build_lenet300100(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        // keep coordinates away from the |w| kink
        for l in net.parametric_indices() {
            for w in net.params_mut(l).unwrap().weight.data_mut() {
                if w.abs() < 1e-3 {
                    *w += if *w >= 0.0 { 2e-3 } else { -2e-3 };
                }
            }
        }
        let resolved = objective.resolve(&net).unwrap();
        let (x, y) = random_batch(seed + 7, 8);
        let grad = composite_gradient(&net, Some((&x, &y)), &resolved).unwrap().grads;
        let dirs: Vec<(usize, Tensor)> = net
            .parametric_indices()
            .into_iter()
            .map(|l| {
                let n = net.params(l).unwrap().weight.len();
                (l, Tensor::from_vec(net.params(l).unwrap().weight.shape().to_vec(),
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            })
            .collect();
        let analytic: f64 = dirs
            .iter()
            .map(|(l, d)| {
                grad.layers[*l].as_ref().unwrap().weight.data().iter().zip(d.data()).map(|(g, d)| g * d).sum::<f64>()
            })
            .sum();
        let h = 1e-6;
        let shifted = |sign: f64| {
            let mut n = net.clone();
            for (l, d) in &dirs {
                n.params_mut(*l).unwrap().weight.add_scaled(d, sign * h).unwrap();
            }
            objective_value(&n, Some((&x, &y)), &resolved).unwrap()
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel <= 1e-5, "relative error {rel:e} ({analytic} vs {numeric})");
    }

    #[test]
    fn elementwise_objective_directional_derivative() {
        directional_check(ObjectiveSpec::elementwise(RegularizerKind::HoyerSquare, 2e-4, 1e-4), 5);
    }

    #[test]
    fn structural_objective_directional_derivative() {
        directional_check(ObjectiveSpec::structural(2e-3, 2e-3, 0.0), 6);
    }

    #[test]
    fn pure_penalty_descent_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut w = Tensor::vector((0..50).map(|_| rng.random_range(-1.0..1.0)).collect());
        let spec = RegularizerSpec::new(RegularizerKind::HoyerSquare, 1.0).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { lr: 1e-4, momentum: 0.0 });
        let mut prev = spec.value(&w).unwrap();
        for _ in 0..1000 {
            let g = spec.gradient(&w).unwrap();
            opt.step(&mut [&mut w], &[&g]).unwrap();
            let v = spec.value(&w).unwrap();
            assert!(v <= prev, "{v} > {prev}");
            prev = v;
        }
    }

    #[test]
    fn zero_epochs_leave_network_untouched() {
        let mut net = build_lenet300100(1);
        let before = net.clone();
        let data = synthetic_blobs(16, 10, 1).unwrap();
        let obj = ObjectiveSpec::data_only().resolve(&net).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::adam(1e-3));
        let log = train_epochs(&mut net, &data, &data, &obj, &mut opt, &TrainConfig::new(0, 8, 1)).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn training_is_deterministic_and_learns_blobs() {
        let (train, test) = synthetic_blobs(500, 2, 3).unwrap().split_at(400);
        let run = || {
            let mut net = build_lenet300100(4);
            let obj = ObjectiveSpec::data_only().resolve(&net).unwrap();
            let mut opt = OptimizerState::new(OptimizerKind::adam(1e-3));
            let log = train_epochs(&mut net, &train, &test, &obj, &mut opt, &TrainConfig::new(5, 64, 8)).unwrap();
            (net, log)
        };
        let (net_a, log_a) = run();
        let (net_b, log_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(net_a, net_b);
        let final_train_acc = net_a.accuracy(train.images(), train.labels(), 100).unwrap();
        assert_eq!(final_train_acc, 1.0);
        let mut csv = Vec::new();
        log_a.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,data_loss,train_acc,test_acc,nonzero_fraction\n"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn keep_best_restores_best_epoch() {
        let (train, test) = synthetic_blobs(260, 3, 5).unwrap().split_at(200);
        let mut net = build_lenet300100(2);
        let obj = ObjectiveSpec::data_only().resolve(&net).unwrap();
        let mut opt = OptimizerState::new(OptimizerKind::adam(1e-3));
        let mut cfg = TrainConfig::new(4, 32, 1);
        cfg.keep_best = true;
        let log = train_epochs(&mut net, &train, &test, &obj, &mut opt, &cfg).unwrap();
        let (_, best) = log.best.unwrap();
        assert_eq!(net.accuracy(test.images(), test.labels(), 100).unwrap(), best);
    }
}

//! Finite-difference checks of the analytic gradients.
//!
//! Errors are measured per probe as `‖a − f‖₂ / max(‖a‖₂, ‖f‖₂)` between the
//! analytic vector `a` and the central-difference vector `f` (step 1e-6).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{build_lenet300100, build_lenet5, Network};
use crate::numerics::Tensor;
use crate::optim::{composite_gradient, objective_value, ObjectiveSpec, PenaltyTerm};
use crate::regularizers::{GroupKind, GroupScheme, RegularizerKind, RegularizerSpec};

pub const REGULARIZER_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-5;
pub const STEP: f64 = 1e-6;
/// Probed coordinates are kept at least this far from zero.
pub const MIN_MAGNITUDE: f64 = 1e-2;

const VECTOR_ROWS: usize = 4;
const VECTOR_COLS: usize = 5;
const NETWORK_BATCH: usize = 4;

/// Deliberate corruption of one item's analytic gradient, used to show the
/// check can fail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub item: String,
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub probes: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            probes: 50,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckItem {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub items: Vec<GradcheckItem>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradcheckItem> {
        self.items.iter().filter(|i| !i.passed)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = l2(analytic).max(l2(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Uniform magnitude in `[MIN_MAGNITUDE, 1]` with a random sign.
fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(MIN_MAGNITUDE..1.0);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

fn regularizer_for(kind: RegularizerKind) -> Result<RegularizerSpec> {
    match kind {
        RegularizerKind::GroupHs => RegularizerSpec::group_hs(
            GroupScheme::for_weight_shape(GroupKind::FcRows, &[VECTOR_ROWS, VECTOR_COLS])?,
            1.0,
        ),
        RegularizerKind::TransformedL1 => RegularizerSpec::transformed_l1(crate::regularizers::DEFAULT_TL1_A, 1.0),
        k => RegularizerSpec::new(k, 1.0),
    }
}

fn corrupt(fault: &Option<Fault>, name: &str, grad: &mut [f64]) {
    if fault.as_ref().is_some_and(|f| f.item == name) {
        grad.iter_mut().for_each(|g| *g *= 1.0 + 1e-3);
    }
}

fn check_regularizer(kind: RegularizerKind, options: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<GradcheckItem> {
    let spec = regularizer_for(kind)?;
    let name = kind.name().to_string();
    let mut worst: f64 = 0.0;
    for _ in 0..options.probes {
        let w = Tensor::from_vec(
            vec![VECTOR_ROWS, VECTOR_COLS],
            (0..VECTOR_ROWS * VECTOR_COLS).map(|_| away_from_zero(rng)).collect(),
        )?;
        let mut analytic = spec.gradient(&w)?.into_data();
        corrupt(&options.fault, &name, &mut analytic);
        let mut numeric = Vec::with_capacity(w.len());
        for j in 0..w.len() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus.data_mut()[j] += STEP;
            minus.data_mut()[j] -= STEP;
            numeric.push((spec.value(&plus)? - spec.value(&minus)?) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(item(name, options.probes, worst, REGULARIZER_TOLERANCE))
}

fn item(name: String, probes: usize, worst: f64, tolerance: f64) -> GradcheckItem {
    GradcheckItem {
        name,
        probes,
        max_rel_error: worst,
        tolerance,
        passed: worst <= tolerance,
    }
}

/// Composite-objective gradient of a whole network against finite
/// differences at `probes` random weight coordinates.
fn check_network(
    name: &str,
    mut net: Network,
    objective: &ObjectiveSpec,
    options: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<GradcheckItem> {
    for l in net.parametric_indices() {
        for w in net.params_mut(l)?.weight.data_mut() {
            if w.abs() < MIN_MAGNITUDE {
                *w = if *w >= 0.0 { MIN_MAGNITUDE } else { -MIN_MAGNITUDE };
            }
        }
    }
    let sample: usize = net.input_shape().iter().product();
    let mut shape = vec![NETWORK_BATCH];
    shape.extend_from_slice(net.input_shape());
    let x = Tensor::from_vec(shape, (0..NETWORK_BATCH * sample).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let y: Vec<usize> = (0..NETWORK_BATCH).map(|_| rng.random_range(0..net.num_classes())).collect();
    let resolved = objective.resolve(&net)?;
    let grads = composite_gradient(&net, Some((&x, &y)), &resolved)?.grads;
    let layers = net.parametric_indices();
    let mut analytic = Vec::with_capacity(options.probes);
    let mut numeric = Vec::with_capacity(options.probes);
    for _ in 0..options.probes {
        let layer = layers[rng.random_range(0..layers.len())];
        let j = rng.random_range(0..net.params(layer)?.weight.len());
        analytic.push(grads.layers[layer].as_ref().expect("parametric").weight.data()[j]);
        let mut eval = |delta: f64| -> Result<f64> {
            net.params_mut(layer)?.weight.data_mut()[j] += delta;
            let v = objective_value(&net, Some((&x, &y)), &resolved);
            net.params_mut(layer)?.weight.data_mut()[j] -= delta;
            v
        };
        let plus = eval(STEP)?;
        let minus = eval(-STEP)?;
        numeric.push((plus - minus) / (2.0 * STEP));
    }
    corrupt(&options.fault, name, &mut analytic);
    let err = relative_error(&analytic, &numeric);
    Ok(item(name.to_string(), options.probes, err, NETWORK_TOLERANCE))
}

pub const NETWORK_ITEMS: [&str; 2] = ["network_elementwise", "network_structural"];

/// Every regularizer kind, then the element-wise objective on
/// LeNet-300-100 and the structural objective on LeNet-5.
pub fn run(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut items = Vec::new();
    for kind in RegularizerKind::ALL {
        items.push(check_regularizer(kind, options, &mut rng)?);
    }
    let mut elementwise = ObjectiveSpec::elementwise(RegularizerKind::HoyerSquare, 1e-2, 1e-3);
    elementwise.terms.push(PenaltyTerm::new(RegularizerKind::TransformedL1, 1e-3));
    items.push(check_network(
        NETWORK_ITEMS[0],
        build_lenet300100(options.seed),
        &elementwise,
        options,
        &mut rng,
    )?);
    items.push(check_network(
        NETWORK_ITEMS[1],
        build_lenet5(options.seed),
        &ObjectiveSpec::structural(1e-2, 1e-2, 1e-3),
        options,
        &mut rng,
    )?);
    Ok(GradcheckReport { items })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn default_run_passes_and_covers_every_kind() {
        let report = run(&GradcheckOptions {
            probes: 10,
            ..GradcheckOptions::default()
        })
        .unwrap();
        for kind in RegularizerKind::ALL {
            assert!(report.items.iter().any(|i| i.name == kind.name()));
        }
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn injected_fault_is_caught() {
        for target in ["hoyer_square", "network_structural"] {
            let report = run(&GradcheckOptions {
                probes: 5,
                seed: 1,
                fault: Some(Fault { item: target.into() }),
            })
            .unwrap();
            let failed: Vec<&str> = report.failures().map(|i| i.name.as_str()).collect();
            assert_eq!(failed, vec![target]);
        }
    }
}

//! Sparsity penalties and their analytic gradients.
//!
//! The scale-invariant family is built from the ratio of the ℓ1 and ℓ2
//! norms of a weight tensor:
//!
//! * Hoyer: `Σ|w| / ‖w‖₂`, in `[1, √N]`
//! * Hoyer-Square: `(Σ|w|)² / Σw²`, in `[1, N]`
//! * Group-HS: Hoyer-Square applied to the vector of group ℓ2 norms
//!
//! All three are invariant to rescaling the tensor. For an all-zero tensor
//! the `0/0` limit is taken as 0 for both value and gradient; there is no
//! epsilon in any denominator, so scale invariance holds exactly.
//!
//! Plain ℓ1, unsquared ℓ2 and transformed-ℓ1 are provided as baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    L1,
    L2,
    Hoyer,
    HoyerSquare,
    GroupHs,
    TransformedL1,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 6] = [
        RegularizerKind::L1,
        RegularizerKind::L2,
        RegularizerKind::Hoyer,
        RegularizerKind::HoyerSquare,
        RegularizerKind::GroupHs,
        RegularizerKind::TransformedL1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::L1 => "l1",
            RegularizerKind::L2 => "l2",
            RegularizerKind::Hoyer => "hoyer",
            RegularizerKind::HoyerSquare => "hoyer_square",
            RegularizerKind::GroupHs => "group_hs",
            RegularizerKind::TransformedL1 => "transformed_l1",
        }
    }

    /// Whether this is one of the scale-invariant ℓ1/ℓ2-ratio penalties.
    pub fn is_hoyer_family(self) -> bool {
        matches!(
            self,
            RegularizerKind::Hoyer | RegularizerKind::HoyerSquare | RegularizerKind::GroupHs
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// One group per output channel of a `[O, C, k, k]` kernel.
    FilterWise,
    /// One group per input channel of a `[O, C, k, k]` kernel.
    ChannelWise,
    /// One group per row (output neuron) of an `[out, in]` matrix.
    FcRows,
    /// One group per column (input neuron) of an `[out, in]` matrix.
    FcColumns,
}

/// Disjoint, covering partition of the flat indices of one weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupScheme {
    kind: GroupKind,
    len: usize,
    groups: Vec<Vec<usize>>,
}

impl GroupScheme {
    /// Validates that `groups` are non-empty, pairwise disjoint and cover
    /// `0..len`.
    pub fn new(kind: GroupKind, len: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; len];
        for (g, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Scheme(format!("group {g} is empty")));
            }
            for &i in group {
                let slot = seen.get_mut(i).ok_or_else(|| {
                    Error::Scheme(format!("group {g} holds index {i} outside 0..{len}"))
                })?;
                if *slot {
                    return Err(Error::Scheme(format!("index {i} appears in more than one group")));
                }
                *slot = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Scheme(format!("index {missing} is not covered by any group")));
        }
        Ok(GroupScheme { kind, len, groups })
    }

    /// Standard scheme for a dense `[out, in]` or conv `[O, C, k, k]` weight.
    pub fn for_weight_shape(kind: GroupKind, shape: &[usize]) -> Result<Self> {
        let groups = match (kind, shape) {
            (GroupKind::FcRows, &[rows, cols]) => (0..rows)
                .map(|r| (r * cols..(r + 1) * cols).collect())
                .collect(),
            (GroupKind::FcColumns, &[rows, cols]) => (0..cols)
                .map(|c| (0..rows).map(|r| r * cols + c).collect())
                .collect(),
            (GroupKind::FilterWise, &[o, c, kh, kw]) => {
                let slab = c * kh * kw;
                (0..o).map(|f| (f * slab..(f + 1) * slab).collect()).collect()
            }
            (GroupKind::ChannelWise, &[o, c, kh, kw]) => {
                let plane = kh * kw;
                (0..c)
                    .map(|ch| {
                        (0..o)
                            .flat_map(|f| {
                                let start = (f * c + ch) * plane;
                                start..start + plane
                            })
                            .collect()
                    })
                    .collect()
            }
            _ => {
                return Err(Error::Scheme(format!(
                    "{kind:?} grouping does not apply to a weight of shape {shape:?}"
                )))
            }
        };
        GroupScheme::new(kind, shape.iter().product(), groups)
    }

    /// Every index in its own group; Group-HS then reduces to Hoyer-Square.
    pub fn singletons(len: usize) -> Self {
        GroupScheme {
            kind: GroupKind::FcColumns,
            len,
            groups: (0..len).map(|i| vec![i]).collect(),
        }
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_norms(&self, w: &[f64]) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| g.iter().map(|&i| w[i] * w[i]).sum::<f64>().sqrt())
            .collect()
    }

    fn check_covers(&self, w: &Tensor) -> Result<()> {
        if self.len != w.len() {
            return Err(Error::Scheme(format!(
                "scheme partitions {} indices but the weight has {}",
                self.len,
                w.len()
            )));
        }
        Ok(())
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1_l2sq(w: &[f64]) -> (f64, f64) {
    w.iter().fold((0.0, 0.0), |(a, s), &x| (a + x.abs(), s + x * x))
}

/// Normalized sparsity measure `(√n − ‖x‖₁/‖x‖₂) / (√n − 1)` in `[0, 1]`.
pub fn hoyer_measure(x: &Tensor) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "hoyer measure needs at least 2 elements, got {n}"
        )));
    }
    let (l1, sq) = l1_l2sq(x.data());
    if sq == 0.0 {
        return Err(Error::DegenerateInput("hoyer measure of an all-zero tensor".into()));
    }
    // ‖x‖₁/‖x‖₂ as √(‖x‖₁²/‖x‖₂²) keeps the extremes exact: one-hot gives
    // √1 and all-equal gives √n.
    let root_n = (n as f64).sqrt();
    Ok((root_n - (l1 * l1 / sq).sqrt()) / (root_n - 1.0))
}

/// `Σw² / Σ|w|`: Hoyer-Square gradient descent pulls every weight with a
/// smaller magnitude toward zero and pushes larger ones away.
pub fn trimming_threshold(w: &[f64]) -> f64 {
    let (l1, sq) = l1_l2sq(w);
    if l1 == 0.0 {
        0.0
    } else {
        sq / l1
    }
}

pub fn l1(w: &[f64]) -> f64 {
    w.iter().map(|x| x.abs()).sum()
}

pub fn l2(w: &[f64]) -> f64 {
    w.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn hoyer(w: &[f64]) -> f64 {
    let (l1, sq) = l1_l2sq(w);
    if sq == 0.0 {
        0.0
    } else {
        l1 / sq.sqrt()
    }
}

pub fn hoyer_square(w: &[f64]) -> f64 {
    let (l1, sq) = l1_l2sq(w);
    if sq == 0.0 {
        0.0
    } else {
        l1 * l1 / sq
    }
}

pub fn transformed_l1(w: &[f64], a: f64) -> f64 {
    w.iter().map(|x| (a + 1.0) * x.abs() / (a + x.abs())).sum()
}

/// `(Σ_g ‖w_g‖)² / Σ_g ‖w_g‖²`. Panics if the scheme size differs from `w`.
pub fn group_hs(w: &[f64], scheme: &GroupScheme) -> f64 {
    assert_eq!(w.len(), scheme.len());
    let norms = scheme.group_norms(w);
    let sum: f64 = norms.iter().sum();
    let sq: f64 = norms.iter().map(|n| n * n).sum();
    if sq == 0.0 {
        0.0
    } else {
        sum * sum / sq
    }
}

pub fn l1_grad(w: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(w) {
        *o = sign(x);
    }
}

pub fn l2_grad(w: &[f64], out: &mut [f64]) {
    let norm = l2(w);
    for (o, &x) in out.iter_mut().zip(w) {
        *o = if norm == 0.0 { 0.0 } else { x / norm };
    }
}

pub fn hoyer_grad(w: &[f64], out: &mut [f64]) {
    let (l1, sq) = l1_l2sq(w);
    if sq == 0.0 {
        out.fill(0.0);
        return;
    }
    let norm = sq.sqrt();
    let coupling = l1 / (norm * sq);
    for (o, &x) in out.iter_mut().zip(w) {
        *o = sign(x) / norm - x * coupling;
    }
}

/// `2·sign(w_j)·(Σ|w|/(Σw²)²)·(Σw² − |w_j|·Σ|w|)`
pub fn hoyer_square_grad(w: &[f64], out: &mut [f64]) {
    let (l1, sq) = l1_l2sq(w);
    if sq == 0.0 {
        out.fill(0.0);
        return;
    }
    let scale = 2.0 * l1 / (sq * sq);
    for (o, &x) in out.iter_mut().zip(w) {
        *o = sign(x) * scale * (sq - x.abs() * l1);
    }
}

pub fn transformed_l1_grad(w: &[f64], a: f64, out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(w) {
        let d = a + x.abs();
        *o = sign(x) * a * (a + 1.0) / (d * d);
    }
}

/// For `w_j` in group `ĝ`:
/// `2·(w_j/‖w_ĝ‖)·(S/Q²)·(Q − ‖w_ĝ‖·S)` with `S = Σ_g‖w_g‖`, `Q = Σ_g‖w_g‖²`.
/// Zero for members of an all-zero group.
pub fn group_hs_grad(w: &[f64], scheme: &GroupScheme, out: &mut [f64]) {
    assert_eq!(w.len(), scheme.len());
    out.fill(0.0);
    let norms = scheme.group_norms(w);
    let sum: f64 = norms.iter().sum();
    let sq: f64 = norms.iter().map(|n| n * n).sum();
    if sq == 0.0 {
        return;
    }
    let scale = 2.0 * sum / (sq * sq);
    for (group, &norm) in scheme.groups().iter().zip(&norms) {
        if norm == 0.0 {
            continue;
        }
        let factor = scale * (sq - norm * sum) / norm;
        for &i in group {
            out[i] = factor * w[i];
        }
    }
}

/// Which penalty to apply, with its decay coefficient.
///
/// `value` and `gradient` return the undecayed penalty; the decay is the
/// weight the penalty carries in a composite objective.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerSpec {
    kind: RegularizerKind,
    decay: f64,
    tl1_a: f64,
    group_scheme: Option<GroupScheme>,
}

pub const DEFAULT_TL1_A: f64 = 1.0;

impl RegularizerSpec {
    /// Any kind except [`RegularizerKind::GroupHs`], which needs a scheme.
    pub fn new(kind: RegularizerKind, decay: f64) -> Result<Self> {
        if kind == RegularizerKind::GroupHs {
            return Err(Error::Argument(
                "group_hs needs a group scheme; use RegularizerSpec::group_hs".into(),
            ));
        }
        check_decay(decay)?;
        Ok(RegularizerSpec {
            kind,
            decay,
            tl1_a: DEFAULT_TL1_A,
            group_scheme: None,
        })
    }

    pub fn group_hs(scheme: GroupScheme, decay: f64) -> Result<Self> {
        check_decay(decay)?;
        Ok(RegularizerSpec {
            kind: RegularizerKind::GroupHs,
            decay,
            tl1_a: DEFAULT_TL1_A,
            group_scheme: Some(scheme),
        })
    }

    pub fn transformed_l1(a: f64, decay: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Argument(format!("transformed-l1 parameter must be > 0, got {a}")));
        }
        let mut spec = RegularizerSpec::new(RegularizerKind::TransformedL1, decay)?;
        spec.tl1_a = a;
        Ok(spec)
    }

    pub fn kind(&self) -> RegularizerKind {
        self.kind
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn tl1_a(&self) -> f64 {
        self.tl1_a
    }

    pub fn group_scheme(&self) -> Option<&GroupScheme> {
        self.group_scheme.as_ref()
    }

    fn scheme_for(&self, w: &Tensor) -> Result<Option<&GroupScheme>> {
        if let Some(s) = &self.group_scheme {
            s.check_covers(w)?;
        }
        Ok(self.group_scheme.as_ref())
    }

    pub fn value(&self, w: &Tensor) -> Result<f64> {
        let scheme = self.scheme_for(w)?;
        let d = w.data();
        Ok(match self.kind {
            RegularizerKind::L1 => l1(d),
            RegularizerKind::L2 => l2(d),
            RegularizerKind::Hoyer => hoyer(d),
            RegularizerKind::HoyerSquare => hoyer_square(d),
            RegularizerKind::GroupHs => group_hs(d, scheme.expect("constructor guarantees scheme")),
            RegularizerKind::TransformedL1 => transformed_l1(d, self.tl1_a),
        })
    }

    pub fn gradient(&self, w: &Tensor) -> Result<Tensor> {
        let mut out = Tensor::zeros(w.shape());
        self.gradient_into(w, out.data_mut())?;
        Ok(out)
    }

    /// Writes the gradient into `out` (same length as `w`).
    pub fn gradient_into(&self, w: &Tensor, out: &mut [f64]) -> Result<()> {
        let scheme = self.scheme_for(w)?;
        if out.len() != w.len() {
            return Err(Error::Dimension(format!(
                "gradient buffer of {} for a weight of {}",
                out.len(),
                w.len()
            )));
        }
        let d = w.data();
        match self.kind {
            RegularizerKind::L1 => l1_grad(d, out),
            RegularizerKind::L2 => l2_grad(d, out),
            RegularizerKind::Hoyer => hoyer_grad(d, out),
            RegularizerKind::HoyerSquare => hoyer_square_grad(d, out),
            RegularizerKind::GroupHs => {
                group_hs_grad(d, scheme.expect("constructor guarantees scheme"), out)
            }
            RegularizerKind::TransformedL1 => transformed_l1_grad(d, self.tl1_a, out),
        }
        Ok(())
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if !(decay >= 0.0 && decay.is_finite()) {
        return Err(Error::Argument(format!("decay must be finite and >= 0, got {decay}")));
    }
    Ok(())
}

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `grad_out` where `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.ensure_same_shape(grad_out, "relu_backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

fn softmax_ce_row(logits: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (g, &z) in grad.iter_mut().zip(logits) {
        *g = (z - max).exp();
        denom += *g;
    }
    for g in grad.iter_mut() {
        *g /= denom;
    }
    grad[label] -= 1.0;
    denom.ln() + max - logits[label]
}

/// `-log softmax(logits)[label]` and its gradient `softmax - one_hot`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let classes = logits.len();
    if label >= classes {
        return Err(Error::Argument(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let mut grad = vec![0.0; classes];
    let loss = softmax_ce_row(logits.data(), label, &mut grad);
    Ok((loss, Tensor::from_vec(logits.shape().to_vec(), grad)?))
}

/// Mean cross-entropy over a `[B, classes]` batch. The returned gradient is
/// that of the mean, i.e. already divided by `B`.
pub fn softmax_cross_entropy_batch(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[batch, classes] = logits.shape() else {
        return Err(Error::Dimension(format!(
            "batched cross-entropy needs [B, classes] logits, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != batch {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut grad = vec![0.0; batch * classes];
    let mut total = 0.0;
    for ((row, g), &label) in logits
        .data()
        .chunks_exact(classes)
        .zip(grad.chunks_exact_mut(classes))
        .zip(labels)
    {
        total += softmax_ce_row(row, label, g);
    }
    let inv = 1.0 / batch as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, Tensor::from_vec(vec![batch, classes], grad)?))
}

/// Index of the largest entry per row; ties resolve to the first.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = *logits.shape().last().expect("non-empty shape");
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_clamps_and_gates() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::ones(&[3])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let (loss, grad) = softmax_cross_entropy(&Tensor::filled(&[10], 0.3), 4).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!(grad.sum().abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(
            softmax_cross_entropy(&Tensor::zeros(&[3]), 3),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn gradient_sums_to_zero_and_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..20 {
            let z = Tensor::vector((0..10).map(|_| rng.random_range(-3.0..3.0)).collect());
            let label = rng.random_range(0..10);
            let (_, grad) = softmax_cross_entropy(&z, label).unwrap();
            assert!(grad.sum().abs() < 1e-12);
            let numeric: Vec<f64> = (0..10)
                .map(|i| {
                    let mut p = z.clone();
                    let mut m = z.clone();
                    p.data_mut()[i] += h;
                    m.data_mut()[i] -= h;
                    (softmax_cross_entropy(&p, label).unwrap().0
                        - softmax_cross_entropy(&m, label).unwrap().0)
                        / (2.0 * h)
                })
                .collect();
            let diff = grad
                .data()
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(diff / grad.l2_norm() <= 1e-6);
        }
    }

    #[test]
    fn relu_backward_matches_finite_differences_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let h = 1e-6;
        for _ in 0..200 {
            let x: f64 = rng.random_range(-1.0..1.0);
            if x.abs() < 1e-3 {
                continue;
            }
            let t = Tensor::vector(vec![x]);
            let analytic = relu_backward(&t, &Tensor::ones(&[1])).unwrap().data()[0];
            let numeric = ((x + h).max(0.0) - (x - h).max(0.0)) / (2.0 * h);
            assert!((analytic - numeric).abs() <= 1e-6 * analytic.abs().max(1.0));
        }
    }

    #[test]
    fn batch_loss_is_mean() {
        let logits = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let (mean, grad) = softmax_cross_entropy_batch(&logits, &[2, 1]).unwrap();
        let a = softmax_cross_entropy(&Tensor::vector(vec![1.0, 2.0, 3.0]), 2).unwrap();
        let b = softmax_cross_entropy(&Tensor::vector(vec![0.0, 0.0, 0.0]), 1).unwrap();
        assert!((mean - (a.0 + b.0) / 2.0).abs() < 1e-15);
        assert!((grad.data()[0] - a.1.data()[0] / 2.0).abs() < 1e-15);
        assert_eq!(argmax_rows(&logits), vec![2, 0]);
    }
}

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Non-overlapping 2×2 max pooling over the last two axes.
///
/// Returns the pooled tensor and, for every output element, the flat index
/// of the winning input element. Ties go to the lowest row-major index.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::Dimension(format!(
            "maxpool2x2 needs at least two axes, got {shape:?}"
        )));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "maxpool2x2 needs even spatial dimensions, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let planes = input.len() / (h * w);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    let data = input.data();
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let n = out_shape.len();
    out_shape[n - 2] = ho;
    out_shape[n - 1] = wo;
    Ok((Tensor::from_vec(out_shape, out)?, argmax))
}

/// Routes each upstream gradient to its recorded argmax; the input shape is
/// `grad_out`'s shape with both spatial axes doubled.
pub fn maxpool2x2_backward(argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Dimension(format!(
            "maxpool2x2_backward: {} indices for {} gradients",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut in_shape = grad_out.shape().to_vec();
    if in_shape.len() < 2 {
        return Err(Error::Dimension(format!(
            "maxpool2x2_backward needs at least two axes, got {in_shape:?}"
        )));
    }
    let n = in_shape.len();
    in_shape[n - 2] *= 2;
    in_shape[n - 1] *= 2;
    let mut grad = Tensor::zeros(&in_shape);
    let g = grad.data_mut();
    for (&idx, &dy) in argmax.iter().zip(grad_out.data()) {
        let slot = g.get_mut(idx).ok_or_else(|| {
            Error::Dimension(format!("maxpool2x2_backward: index {idx} out of range"))
        })?;
        *slot += dy;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_maximum() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn ties_prefer_first_row_major() {
        let x = Tensor::filled(&[1, 4, 4], 0.5);
        let (_, idx) = maxpool2x2(&x).unwrap();
        assert_eq!(idx, vec![0, 2, 8, 10]);
    }

    #[test]
    fn backward_routes_to_argmax() {
        let x = Tensor::from_vec(vec![1, 2, 4], vec![1.0, 5.0, 0.0, 0.0, 2.0, 3.0, 0.0, 7.0]).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let g = maxpool2x2_backward(&idx, &Tensor::ones(y.shape())).unwrap();
        assert_eq!(g.shape(), x.shape());
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(matches!(maxpool2x2(&Tensor::zeros(&[3, 4])), Err(Error::Dimension(_))));
        assert!(matches!(maxpool2x2(&Tensor::zeros(&[4, 5])), Err(Error::Dimension(_))));
    }

    #[test]
    fn batched_planes() {
        let x = Tensor::from_vec(vec![2, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0, 9.0, 1.0, 2.0, 3.0]).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 1, 1, 1]);
        assert_eq!(y.data(), &[3.0, 9.0]);
        assert_eq!(idx, vec![3, 4]);
    }
}

//! Stride-1, unpadded 2-D cross-correlation via im2col + gemm.

use crate::error::{Error, Result};
use crate::numerics::linalg::{gemm, MatRef};
use crate::numerics::Tensor;

/// Geometry of one convolution: `[C_in, H, W]` input, `C_out` square
/// `k×k` kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height - self.kernel + 1
    }

    pub fn out_width(&self) -> usize {
        self.width - self.kernel + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn output_len(&self) -> usize {
        self.out_channels * self.out_pixels()
    }

    fn from_shapes(input: &[usize], kernels: &[usize]) -> Result<Self> {
        let (&[c, h, w], &[o, ci, kh, kw]) = (input, kernels) else {
            return Err(Error::Dimension(format!(
                "conv2d expects input [C,H,W] and kernels [O,C,k,k], got {input:?} and {kernels:?}"
            )));
        };
        if ci != c || kh != kw {
            return Err(Error::Dimension(format!(
                "conv2d kernels {kernels:?} incompatible with input {input:?}"
            )));
        }
        if kh > h || kw > w {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        Ok(ConvGeometry {
            in_channels: c,
            out_channels: o,
            kernel: kh,
            height: h,
            width: w,
        })
    }
}

/// Unfold the input into a `[C·k·k, Ho·Wo]` patch matrix.
fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let (k, ho, wo) = (g.kernel, g.out_height(), g.out_width());
    let pixels = ho * wo;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..ho {
                    let src = &plane[(oy + ki) * g.width + kj..][..wo];
                    dst[oy * wo..(oy + 1) * wo].copy_from_slice(src);
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the input, accumulating overlaps.
fn col2im(g: &ConvGeometry, cols: &[f64], grad_input: &mut [f64]) {
    let (k, ho, wo) = (g.kernel, g.out_height(), g.out_width());
    let pixels = ho * wo;
    for c in 0..g.in_channels {
        let plane = &mut grad_input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..ho {
                    let dst = &mut plane[(oy + ki) * g.width + kj..][..wo];
                    for (d, s) in dst.iter_mut().zip(&src[oy * wo..(oy + 1) * wo]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward_slice(
    g: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
    cols: &mut Vec<f64>,
    out: &mut [f64],
) {
    cols.resize(g.patch_len() * g.out_pixels(), 0.0);
    im2col(g, input, cols);
    let pixels = g.out_pixels();
    for (o, row) in out.chunks_exact_mut(pixels).enumerate() {
        row.fill(bias[o]);
    }
    gemm(
        MatRef::new(kernels, g.out_channels, g.patch_len()),
        MatRef::new(cols, g.patch_len(), pixels),
        1.0,
        out,
    );
}

/// Accumulates kernel and bias gradients; overwrites `grad_input` if given.
pub(crate) fn backward_slice(
    g: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    cols: &mut Vec<f64>,
    grad_input: Option<&mut [f64]>,
    grad_kernels: &mut [f64],
    grad_bias: &mut [f64],
) {
    let pixels = g.out_pixels();
    cols.resize(g.patch_len() * pixels, 0.0);
    im2col(g, input, cols);
    gemm(
        MatRef::new(grad_out, g.out_channels, pixels),
        MatRef::new(cols, g.patch_len(), pixels).t(),
        1.0,
        grad_kernels,
    );
    for (gb, row) in grad_bias.iter_mut().zip(grad_out.chunks_exact(pixels)) {
        *gb += row.iter().sum::<f64>();
    }
    if let Some(grad_input) = grad_input {
        gemm(
            MatRef::new(kernels, g.out_channels, g.patch_len()).t(),
            MatRef::new(grad_out, g.out_channels, pixels),
            0.0,
            cols,
        );
        grad_input.fill(0.0);
        col2im(g, cols, grad_input);
    }
}

fn check_bias(bias: &Tensor, out_channels: usize) -> Result<()> {
    if bias.shape() != [out_channels] {
        return Err(Error::Dimension(format!(
            "conv2d bias {:?} does not match {out_channels} output channels",
            bias.shape()
        )));
    }
    Ok(())
}

/// Single-sample forward pass: `[C_in,H,W]` → `[C_out,H-k+1,W-k+1]`.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = ConvGeometry::from_shapes(input.shape(), kernels.shape())?;
    check_bias(bias, g.out_channels)?;
    let mut out = vec![0.0; g.output_len()];
    forward_slice(&g, input.data(), kernels.data(), bias.data(), &mut Vec::new(), &mut out);
    Tensor::from_vec(vec![g.out_channels, g.out_height(), g.out_width()], out)
}

/// Gradients of the single-sample forward map with respect to input,
/// kernels and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::from_shapes(input.shape(), kernels.shape())?;
    let expected = [g.out_channels, g.out_height(), g.out_width()];
    if grad_out.shape() != expected {
        return Err(Error::Dimension(format!(
            "conv2d grad_out {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let mut gi = vec![0.0; g.input_len()];
    let mut gk = vec![0.0; kernels.len()];
    let mut gb = vec![0.0; g.out_channels];
    backward_slice(
        &g,
        input.data(),
        kernels.data(),
        grad_out.data(),
        &mut Vec::new(),
        Some(&mut gi),
        &mut gk,
        &mut gb,
    );
    Ok((
        Tensor::from_vec(input.shape().to_vec(), gi)?,
        Tensor::from_vec(kernels.shape().to_vec(), gk)?,
        Tensor::vector(gb),
    ))
}

/// Batched forward pass over `[B,C_in,H,W]`.
pub fn conv2d_forward_batch(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let Some((&batch, sample)) = input.shape().split_first() else {
        unreachable!("tensors have at least one axis")
    };
    let g = ConvGeometry::from_shapes(sample, kernels.shape())?;
    check_bias(bias, g.out_channels)?;
    let mut out = vec![0.0; batch * g.output_len()];
    let mut cols = Vec::new();
    for (x, y) in input
        .data()
        .chunks_exact(g.input_len())
        .zip(out.chunks_exact_mut(g.output_len()))
    {
        forward_slice(&g, x, kernels.data(), bias.data(), &mut cols, y);
    }
    Tensor::from_vec(vec![batch, g.out_channels, g.out_height(), g.out_width()], out)
}

/// Batched backward pass; kernel and bias gradients are summed over the batch.
/// The input gradient is skipped when `need_input_grad` is false.
pub fn conv2d_backward_batch(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let Some((&batch, sample)) = input.shape().split_first() else {
        unreachable!("tensors have at least one axis")
    };
    let g = ConvGeometry::from_shapes(sample, kernels.shape())?;
    let expected = [batch, g.out_channels, g.out_height(), g.out_width()];
    if grad_out.shape() != expected {
        return Err(Error::Dimension(format!(
            "conv2d grad_out {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let mut gi = need_input_grad.then(|| vec![0.0; input.len()]);
    let mut gk = vec![0.0; kernels.len()];
    let mut gb = vec![0.0; g.out_channels];
    let mut cols = Vec::new();
    for s in 0..batch {
        let x = &input.data()[s * g.input_len()..][..g.input_len()];
        let dy = &grad_out.data()[s * g.output_len()..][..g.output_len()];
        let dx = gi
            .as_mut()
            .map(|gi| &mut gi[s * g.input_len()..(s + 1) * g.input_len()]);
        backward_slice(&g, x, kernels.data(), dy, &mut cols, dx, &mut gk, &mut gb);
    }
    Ok((
        gi.map(|gi| Tensor::from_vec(input.shape().to_vec(), gi)).transpose()?,
        Tensor::from_vec(kernels.shape().to_vec(), gk)?,
        Tensor::vector(gb),
    ))
}

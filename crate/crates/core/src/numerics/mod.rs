//! Dense tensors and the forward/backward kernels the trainer is built on.
//!
//! Everything is `f64`. Kernels are pure functions of their inputs.

mod activation;
mod conv;
mod linalg;
mod pool;
mod tensor;

pub use activation::{
    argmax_rows, relu, relu_backward, softmax_cross_entropy, softmax_cross_entropy_batch,
};
pub use conv::{
    conv2d_backward, conv2d_backward_batch, conv2d_forward, conv2d_forward_batch, ConvGeometry,
};
pub use linalg::matmul;
pub(crate) use linalg::{gemm, MatRef};
pub use pool::{maxpool2x2, maxpool2x2_backward};
pub use tensor::Tensor;

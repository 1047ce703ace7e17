pub mod data;
pub mod descent;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod pruning;
pub mod regularizers;

pub use error::{Error, Result};
pub use numerics::Tensor;

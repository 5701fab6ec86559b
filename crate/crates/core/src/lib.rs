//! A small convolutional network engine trained with backward-forward
//! propagation: besides the usual forward and backward passes, each training
//! step propagates the gradient of an L1 penalty on the input-gradient
//! heatmap forward through the network's first-order derivative, so heatmap
//! sparsity can be optimised together with the regression loss.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heatmap;
pub mod net;
pub mod ops;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{channel_q_norm, entrywise_mul_broadcast, Dims, QNorm, Scalar, Tensor4};

//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations record a graph as they run; [`Tensor::backward`] walks it in
//! reverse topological order. All kernels are single-threaded and reduce in a
//! fixed order, so identical inputs give bitwise-identical outputs.

pub mod error;
pub mod gradcheck;
mod ops;
pub mod optim;
pub mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, gradient_check_params, FD_STEP};
pub use ops::{kl_divergence, KL_EPS, NORMALIZATION_TOL};
pub use optim::Adam;
pub use rng::RngState;
pub use tensor::{grad_enabled, no_grad, NoGradGuard, Tensor};

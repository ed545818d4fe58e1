//! Dense `f32`/`f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! Values are row-major. Reductions accumulate in `f64` in a fixed order, so
//! a forward pass is bitwise reproducible for fixed inputs.

mod error;
mod graph;
pub mod kernels;
mod scalar;
mod tensor;

#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

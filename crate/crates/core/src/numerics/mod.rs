//! Dense tensors and define-by-run reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major array. A [`Graph`] records every operation
//! applied to its nodes; [`Graph::backward`] walks that record once in reverse.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Segment, Var};
pub use tensor::{broadcast_shape, Tensor};

/// Element type of every tensor. 64-bit unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Name of [`Scalar`] as recorded in checkpoint manifests.
pub const SCALAR_DTYPE: &str = if cfg!(feature = "f32") { "f32" } else { "f64" };

//! Small dense tensor library with a reverse-mode tape.
//!
//! Scope is exactly what a compact conditional GAN needs on CPU: strided 2-d
//! convolutions lowered to GEMM, fully connected layers, batch/instance
//! normalization, pointwise activations, channel slicing and the two loss
//! reductions used by least-squares adversarial training. Everything is generic
//! over [`Real`] so the same network code runs in `f32` for training and `f64`
//! for finite-difference checks.

pub mod adam;
pub mod check;
mod error;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod real;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use params::{Bound, ParamId, ParamSet};
pub use real::{gemm, Real};
pub use tensor::Tensor;

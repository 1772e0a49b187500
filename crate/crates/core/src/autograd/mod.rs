//! Dense tensors with tape-based reverse-mode differentiation.

pub mod gradcheck;
mod kernels;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use params::{AdamConfig, Binding, Direction, GradMap, ModelParams, Param};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

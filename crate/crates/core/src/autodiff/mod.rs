//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod graph;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::Graph;
pub use tape::{gelu, AttnMask, Gradients, Tape, Var, MASKED_LOGIT};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

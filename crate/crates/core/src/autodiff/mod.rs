//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records each operation applied to [`Var`] handles. After a
//! forward pass, [`Tape::backward`] sweeps the record in reverse and returns
//! the gradient of a scalar loss for every leaf created with [`Tape::param`].

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{AttentionLayout, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

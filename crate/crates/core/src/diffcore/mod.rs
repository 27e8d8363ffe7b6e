//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as it is evaluated. [`Tape::backward`]
//! then sweeps the record in reverse and returns the gradient of a scalar
//! root with respect to every differentiable leaf. [`Tape::stop_gradient`]
//! marks a value as constant for differentiation, which is how the gradient
//! surrogates in [`crate::objectives`] block selected paths.

mod tape;
mod tensor;

pub use tape::{Gradients, NodeRef, OpKind, Reduce, Tape};
pub use tensor::Tensor;

//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation with its inputs; [`Tape::backward`]
//! walks the record in reverse from a scalar output and returns
//! [`Gradients`] for every node that depends on a differentiable leaf.
//! There is no broadcasting beyond scalar factors: reshape, repeat or
//! gather explicitly.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{CustomBackward, GRAM_SCHMIDT_EPS, Gradients, Tape, Var};
pub use tensor::Tensor;

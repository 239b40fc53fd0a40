//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive as it is applied; [`Tape::backward`]
//! walks the record in reverse and deposits gradients on the leaves that
//! asked for them.

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, DEFAULT_EPS};
pub use tape::{conv_out_dim, ConvGeom, Primitive, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

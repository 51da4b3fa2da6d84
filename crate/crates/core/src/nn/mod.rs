//! Dense f32 kernels for forward evaluation.
//!
//! Every kernel validates shapes and rejects non-finite input; outputs of
//! finite inputs are finite.

mod ops;
mod rng;
mod tensor;

pub use ops::*;
pub use rng::Rng;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> NnError {
    NnError::ShapeMismatch { op, left: left.to_vec(), right: right.to_vec() }
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> NnError {
    NnError::Invalid { op, msg: msg.into() }
}

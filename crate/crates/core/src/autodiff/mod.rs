//! Reverse-mode automatic differentiation over dense double tensors,
//! restricted to the operators the feature-grid network needs.
//!
//! Every operation evaluates eagerly and records itself on a [`Tape`];
//! [`Tape::backward`] then accumulates adjoints in reverse order. A
//! forward value that is not finite is reported as an error.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

use crate::codec::DecodeError;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport, REL_FLOOR};
#[doc(hidden)]
pub use tape::Fault;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {message}")]
    Shape { op: &'static str, message: String },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("label {value} at index {index} is not 0 or 1")]
    InvalidLabel { index: usize, value: f64 },
    #[error("query {index} lies outside the canonical cube")]
    QueryOutOfDomain { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, message: String) -> Self {
        Self::Shape { op, message }
    }
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

//! Reverse-mode differentiation over dense `f64` arrays of rank at most two,
//! plus the Adam optimizer used to train the network and PDE parameters.
//!
//! A [`Tape`] records every operation in execution order; [`Tape::backward`]
//! walks it once in reverse. Constant sparse maps (differential-operator
//! stencils, interpolation weights) are first-class ops so the physics loss
//! stays linear in the node field.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, adam_step_grouped, AdamState, BETA1, BETA2, EPSILON};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{SparseMatrix, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape { op: &'static str, lhs: String, rhs: String },
    #[error("{len} values cannot fill a {rows}x{cols} tensor")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("{0} requires a non-empty input")]
    Empty(&'static str),
    #[error("variable is not recorded on this tape")]
    ForeignVar,
    #[error("backward requires a scalar loss, got {}x{}", .0.0, .0.1)]
    NotScalar((usize, usize)),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(usize),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        TensorError::Shape { op, lhs: format!("{}x{}", lhs.0, lhs.1), rhs: format!("{}x{}", rhs.0, rhs.1) }
    }
}

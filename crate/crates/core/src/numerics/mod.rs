//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with};
pub use tape::{softmax, Gradients, Tape, Var, LOG_EPS};
pub use tensor::{argmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible operand shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", .shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("row index {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
    #[error("{0}: no operands")]
    Empty(&'static str),
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl NumericsError {
    pub(crate) fn shapes(op: &'static str, tensors: &[&Tensor]) -> Self {
        Self::Shape {
            op,
            shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
        }
    }
}

//! Dense tensors with tape-based reverse-mode differentiation.

mod dense;
pub mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{finite_difference_grad, max_relative_error};
pub use kernels::BnMode;
pub use scalar::{gemm, Layout, Precision, Scalar};
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid configuration: {detail}")]
    Config { op: &'static str, detail: String },
    #[error("batchnorm2d: degenerate batch, {count} values per channel (need at least 2 in train mode)")]
    DegenerateBatch { count: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: label {label} out of range for {classes} classes")]
    Label { op: &'static str, label: usize, classes: usize },
    #[error("{op}: non-finite value produced from finite inputs")]
    NonFinite { op: &'static str },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

pub(crate) fn config_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Config { op, detail: detail.into() }
}

//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand has a shape the operation cannot accept.
    #[error("{op} expects {expected}, got shape {got:?}")]
    InvalidShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    /// Tensor construction with mismatched shape/data length.
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },

    /// `backward` called on a non-scalar node.
    #[error("loss node must be scalar, got shape {got:?}")]
    NonScalarLoss { got: Vec<usize> },

    /// Finite-difference probe produced a non-finite loss value.
    #[error("non-finite loss while perturbing parameter {param} coordinate {coord}")]
    NonFiniteLoss { param: usize, coord: usize },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation that requires data received none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// CSV cell that could not be parsed, with 1-based coordinates.
    #[error("csv error at {path} row {row}, column {column}: {message}")]
    Csv {
        path: String,
        row: usize,
        column: usize,
        message: String,
    },

    /// Malformed or unreadable configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Corrupt or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss; the run is aborted and recorded.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

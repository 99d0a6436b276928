use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op} produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("softmax row {row} has no unmasked entry")]
    FullyMaskedRow { row: usize },
    #[error("batch norm in train mode needs at least 2 rows, got {rows}")]
    BatchTooSmall { rows: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("gradient tracking is disabled on this graph")]
    GradDisabled,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

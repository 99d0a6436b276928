use std::path::PathBuf;

use thiserror::Error;
use tspnco_autograd::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("not a permutation of 0..{n}: {order:?}")]
    NotPermutation { n: usize, order: Vec<usize> },
    #[error("{solver} supports at most {max} nodes, got {n}")]
    SizeLimit {
        solver: &'static str,
        n: usize,
        max: usize,
    },
    #[error("optimal length must be positive, got {0}")]
    NonPositiveOptimum(f64),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("dataset has no reference solutions")]
    MissingLabels,
    #[error("no exact reference available for n={n}")]
    ReferenceUnavailable { n: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss diverged (non-finite) at mini-batch {batch}")]
    Diverged { batch: u64 },
    #[error("reports are not aligned: {0}")]
    Misaligned(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

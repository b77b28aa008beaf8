use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T> = std::result::Result<T, LtnError>;

#[derive(Debug, Error)]
pub enum LtnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("history has {got} positions, need at least {need}")]
    HistoryTooShort { got: usize, need: usize },
    #[error("ground-truth future required in this mode")]
    MissingFuture,
    #[error("map patch is not square: size {size}, {cells} cells")]
    NonSquarePatch { size: usize, cells: usize },
    #[error("map patch is {got} cells wide, encoder expects {expected}")]
    PatchSize { got: usize, expected: usize },
    #[error("horizon mismatch: {got} positions, expected {expected}")]
    HorizonMismatch { got: usize, expected: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

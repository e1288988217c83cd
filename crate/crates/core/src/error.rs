use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid map element: {0}")]
    InvalidElement(String),

    #[error("invalid normalization frame: {0}")]
    InvalidFrame(String),

    #[error("point set is empty; chamfer distance is undefined")]
    EmptyPointSet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cost matrix has {predictions} predictions for {targets} targets; need at least as many predictions")]
    TooFewPredictions { targets: usize, predictions: usize },

    #[error("non-finite cost at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("point count mismatch: prediction has {predicted}, target has {target}")]
    PointCountMismatch { predicted: usize, target: usize },

    #[error("scene exceeds model capacity: {0}")]
    CapacityExceeded(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("{path}: record {record}: {message}")]
    Format {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

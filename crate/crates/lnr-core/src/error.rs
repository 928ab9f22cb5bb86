use std::path::PathBuf;
use thiserror::Error;

/// Unified error type for dataset IO, compositing, training, and geometry.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("incomplete dataset: missing {0}")]
    IncompleteDataset(PathBuf),
    #[error("inconsistent dataset: {0}")]
    InconsistentDataset(String),
    #[error("invalid trimap: {0}")]
    InvalidTrimap(String),
    #[error("invalid part id {part} (atlas has {parts} parts)")]
    InvalidPartId { part: u16, parts: usize },
    #[error("order is not a permutation of 1..={n}: {order:?}")]
    NotPermutation { order: Vec<usize>, n: usize },
    #[error("invalid layer index {index} (valid 0..={n})")]
    InvalidLayerIndex { index: usize, n: usize },
    #[error("resolution mismatch: expected {expected:?}, got {got:?}")]
    ResolutionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input size: {0}")]
    InvalidInputSize(String),
    #[error("refiner input mismatch: {0}")]
    RefinerInputMismatch(String),
    #[error("edit out of range: {0}")]
    EditOutOfRange(String),
    #[error("trajectory out of bounds: {0}")]
    TrajectoryOutOfBounds(String),
    #[error("empty layer at frame {frame}")]
    EmptyLayer { frame: usize },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("underdetermined: {got} correspondences, need at least {need}")]
    Underdetermined { got: usize, need: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("non-invertible transform")]
    NonInvertible,
    #[error("tracking failed at frame {frame}: {reason}")]
    TrackingFailed { frame: usize, reason: String },
    #[error("signal too short: length {len}, need at least {need}")]
    SignalTooShort { len: usize, need: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

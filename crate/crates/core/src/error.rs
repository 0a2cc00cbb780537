use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the completion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {index} coincides with the camera (direction length {length:e})")]
    DegenerateRay { index: usize, length: f64 },

    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("negative offset {value} at row {row}, column {col}")]
    NegativeOffset { row: usize, col: usize, value: f64 },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("input set is empty")]
    EmptyInput,

    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },

    #[error("loss node is {rows}x{cols}, expected a scalar")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("need at least {needed} points, got {available}")]
    InsufficientPoints { needed: usize, available: usize },

    #[error("camera lies inside the bounding sphere of the cloud")]
    CameraInside,

    #[error("only {retained} points survived occlusion, need at least {needed}")]
    DegenerateScan { retained: usize, needed: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error in {}: {message} ({location})", path.display())]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("unsupported file format: {}", .0.display())]
    UnsupportedFormat(PathBuf),

    #[error("dataset is empty")]
    DatasetEmpty,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

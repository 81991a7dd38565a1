use std::path::PathBuf;

use crate::band::Band;

/// Errors produced by the msplat core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("band mismatch: {0}")]
    BandMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("band list is empty")]
    EmptyBandList,
    #[error("unknown band name `{0}`")]
    UnknownBandName(String),
    #[error("band {0} is not part of the active band set")]
    UnknownBand(Band),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("direction is not unit length (norm {0})")]
    NonUnitDirection(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image too small for SSIM window: {width}x{height}")]
    ImageTooSmall { width: usize, height: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("densify called outside its window at iteration {0}")]
    CalledOutsideWindow(u64),
    #[error("point cloud is empty")]
    EmptyPointCloud,
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid train plan: {0}")]
    InvalidPlan(String),
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(u64),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    IndivisibleImage { height: usize, width: usize, patch: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("selection index {index} out of bounds for union of {len} rows")]
    IndexOutOfBounds { index: usize, len: usize },

    #[error("expected {expected} decoder stages, got {got}")]
    StageCount { expected: usize, got: usize },

    #[error("contrast factor {0} outside [0, 1]")]
    ContrastFactor(f64),

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("frozen parameter {0} changed during training")]
    FrozenParameterChanged(String),

    #[error("missing image file {}", .0.display())]
    MissingImage(PathBuf),

    #[error("malformed JSON in {}: {source}", path.display())]
    MalformedJson { path: PathBuf, source: serde_json::Error },

    #[error("pairing manifest entry {0} has no matching annotation or image file")]
    DanglingPair(u64),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

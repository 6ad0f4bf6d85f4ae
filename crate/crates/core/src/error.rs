use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: expected a rank-{expected} tensor, got shape {actual:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },

    #[error("tensor data length {actual} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, actual: usize },

    #[error("invalid shape {0:?}: every extent must be positive")]
    InvalidShape(Vec<usize>),

    #[error("{op}: spatial extent {height}x{width} is too small")]
    SpatialTooSmall {
        op: &'static str,
        height: usize,
        width: usize,
    },

    #[error("batch norm in train mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid value for {name}: {value}")]
    InvalidHyperparameter { name: &'static str, value: f64 },

    #[error("backward called without a recorded forward pass")]
    EmptyTrace,

    #[error("class {0} has no support embeddings")]
    EmptyClass(usize),

    #[error("prototype sets are not comparable: {0} vs {1} classes")]
    PrototypeMismatch(usize, usize),

    #[error("task weight {index} = {value} is below the minimum magnitude {min}")]
    WeightTooSmall { index: usize, value: f64, min: f64 },

    #[error("episode spec cannot be satisfied: {0}")]
    ImpossibleSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image decode error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

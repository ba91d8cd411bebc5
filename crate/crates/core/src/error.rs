use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),

    #[error("trace too short: {len} actions for horizon {horizon}")]
    TraceTooShort { len: usize, horizon: usize },

    #[error("unsplittable task {task}: {reason}")]
    UnsplittableTask { task: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("step {step} out of range 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("format version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated array file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("non-finite loss {loss} at step {step}")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI maps them to exit codes:
/// configuration and input-validation problems exit with 1, runtime
/// failures (I/O, tensor backend) exit with 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("validation error in plane {plane}: {msg}")]
    Validation { plane: String, msg: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate statistics: channel {0} has zero variance")]
    DegenerateStats(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing segmentation labels for sample {0}")]
    MissingLabel(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("scene too small: {0}")]
    SceneTooSmall(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (sel={sel}, cel={cel}): batch [{batch}]")]
    NonFiniteLoss {
        step: usize,
        sel: f64,
        cel: f64,
        batch: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Process exit code for this error class: 1 for validation/config
    /// problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. }
            | Error::Validation { .. }
            | Error::InsufficientData(_)
            | Error::DegenerateStats(_)
            | Error::Config(_)
            | Error::MissingLabel(_)
            | Error::Label(_)
            | Error::Index(_)
            | Error::Shape(_)
            | Error::SceneTooSmall(_)
            | Error::EmptySplit(_)
            | Error::Usage(_) => 1,
            Error::Checkpoint(_)
            | Error::NonFiniteLoss { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Tensor(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

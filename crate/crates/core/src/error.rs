use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in layer {layer}: {context}")]
    NonFinite { layer: usize, context: String },

    #[error("training diverged at {stage} {index}: {reason}")]
    Diverged {
        stage: &'static str,
        index: usize,
        reason: String,
    },

    #[error("episode is over (time step {0})")]
    EpisodeOver(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("style label {label} out of range for K = {k}")]
    LabelRange { label: usize, k: usize },

    #[error("style count mismatch: estimator has K = {estimator}, dataset has K = {dataset}")]
    StyleMismatch { estimator: usize, dataset: usize },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_)
            | Error::InvalidArgument(_)
            | Error::StyleMismatch { .. }
            | Error::LabelRange { .. }
            | Error::EmptyDataset
            | Error::Shape { .. } => 2,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::EpisodeOver(_) => 3,
            Error::Io { .. } | Error::Format { .. } | Error::Json(_) => 4,
        }
    }
}

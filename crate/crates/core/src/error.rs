use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid world spec: {0}")]
    WorldSpec(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite loss at step {step} (batch {batch_index}){}", dump.as_ref().map(|p| format!(", batch dumped to {}", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        step: u64,
        batch_index: usize,
        dump: Option<PathBuf>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Nn(#[from] ua_nn::NnError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ConfigParse { .. }
                | Error::InvalidConfig(_)
                | Error::WorldSpec(_)
                | Error::InputShape { .. }
                | Error::Dataset(_)
                | Error::InsufficientData(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

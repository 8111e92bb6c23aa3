use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("hyperparameter estimation failed: {0}")]
    Estimation(String),

    #[error("invalid model state: {0}")]
    InvalidState(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("non-finite value in block `{block}` at iteration {iteration}")]
    NonFinite { iteration: usize, block: &'static str },

    #[error("audit failed at iteration {iteration}: incremental {incremental} vs recomputed {recomputed}")]
    Audit {
        iteration: usize,
        incremental: f64,
        recomputed: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("refusing to overwrite existing output {0} (pass --force)")]
    OutputExists(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Whether the error stems from invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. } | Error::Audit { .. } | Error::DegenerateCovariance(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

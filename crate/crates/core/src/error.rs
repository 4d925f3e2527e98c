use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error in {path}: missing column `{column}`")]
    Schema { path: PathBuf, column: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("data error in {path} at row {row}: {message}")]
    DataRow {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("population error: {0}")]
    Population(String),

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("feature error: {0}")]
    Feature(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("kernel matrix could not be factorized even with jitter {jitter:e}")]
    Conditioning { jitter: f64 },

    #[error("hyperparameter fit failed: {0}")]
    Fit(String),

    #[error("knee error: {0}")]
    Knee(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Spec(_) | Error::Usage(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

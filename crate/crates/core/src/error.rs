use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("item `{item}` has no row in feature file {path}")]
    MissingFeatureRow { item: String, path: PathBuf },

    #[error("feature file {path}: {message}")]
    FeatureFormat { path: PathBuf, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("negative sampling failed for user {user}: no unobserved item after {retries} retries")]
    Sampling { user: usize, retries: usize },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("training diverged at epoch {epoch}, step {step}: {component} loss is not finite")]
    Divergence {
        epoch: usize,
        step: usize,
        component: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input (files, configs, arguments) as
    /// opposed to failures inside the numerics.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::Shape(_)
        )
    }
}

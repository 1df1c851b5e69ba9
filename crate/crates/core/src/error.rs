use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Ingest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{0}")]
    Precondition(String),

    /// Iterative solver failed to reach its tolerance.
    #[error("no convergence: {0}")]
    NonConvergence(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("factorization diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Box<crate::factorization::TrainTrace>,
    },

    #[error("non-finite value in {term}")]
    NonFinite { term: &'static str },

    #[error("pipeline stage `{stage}` failed")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn artifact(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            message: message.into(),
        }
    }
}

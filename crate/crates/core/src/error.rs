use std::path::PathBuf;

use thiserror::Error;

use crate::collectives::CollectiveError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}, column {col}: {message}")]
    Parse {
        row: usize,
        col: usize,
        message: String,
    },

    #[error(transparent)]
    Collective(#[from] CollectiveError),

    /// Replicated state (B, seeds, parameters) disagrees across ranks.
    #[error("workers diverged: {0}")]
    Divergence(String),

    /// Training produced a non-finite loss; `epoch` is the global epoch index.
    #[error("training aborted at epoch {epoch}: {reason}")]
    Aborted { epoch: usize, reason: String },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

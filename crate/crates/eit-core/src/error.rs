//! Error type shared across the toolkit.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum EitError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("solver: {0}")]
    Solver(String),

    #[error("data: {0}")]
    Data(String),

    #[error("model: {0}")]
    Model(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EitError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EitError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, EitError>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Parse { what: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("unknown skill id `{0}`")]
    UnknownSkill(String),

    #[error("unknown task id `{0}`")]
    UnknownTask(String),

    #[error("budget infeasible: {0}")]
    Infeasible(String),

    #[error("non-finite training loss at step {step}")]
    NonFinite { step: usize },

    #[error("missing artifact for stage `{stage}`: {path}")]
    MissingArtifact { stage: String, path: PathBuf },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

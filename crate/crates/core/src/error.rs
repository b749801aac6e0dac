use std::path::PathBuf;

use thiserror::Error;

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

    #[error("video {video_id}: {message}")]
    Shape { video_id: String, message: String },

    #[error("video {video_id}: non-finite value in {tensor}")]
    NonFiniteFeature { video_id: String, tensor: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("caption rows are not probability distributions: {0}")]
    NotADistribution(String),

    #[error("non-finite loss in {term}")]
    NonFiniteLoss { term: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

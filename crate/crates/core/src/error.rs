use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}: unsupported format: {message}")]
    Unsupported { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

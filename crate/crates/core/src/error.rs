//! Error types shared across the toolkit.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration. CLI maps this to exit code 2.
    #[error("config error: {0}")]
    Config(String),

    /// Missing or unusable data (manifests, images, checkpoints). CLI maps
    /// this to exit code 3.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An API contract was violated by the caller (shape mismatch, label
    /// out of range, unsplit dataset handed to the trainer, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values surfaced during training or evaluation.
    #[error("numerical error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }
}

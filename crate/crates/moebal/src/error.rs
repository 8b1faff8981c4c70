use std::path::{Path, PathBuf};
use thiserror::Error;

/// Crate-wide error type. `Dim` is a shape/axis mismatch, `Contract` a
/// violated operation precondition, `NonFinite` a NaN/Inf surfaced from
/// user-provided data or a diverged loss.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension: {0}")]
    Dim(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("non-finite: {0}")]
    NonFinite(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Short machine-parsable kind tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dim(_) => "dim",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non-finite",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

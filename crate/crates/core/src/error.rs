use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error kinds surfaced by every stage of the build and query path.
///
/// The CLI maps these onto distinct exit codes, so the variants track the
/// failure class rather than the module that raised them.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed arguments that violate an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),
    /// A file failed header or payload validation.
    #[error("format error: {0}")]
    Format(String),
    /// A map-shuffle-reduce stage failed.
    #[error("pipeline error: {0}")]
    Pipeline(String),
    /// A loaded index is inconsistent with the query being served.
    #[error("index error: {0}")]
    Index(String),
    /// A shard manifest is missing entries or references unreadable files.
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn pipeline(msg: impl Into<String>) -> Self {
        Error::Pipeline(msg.into())
    }

    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
}

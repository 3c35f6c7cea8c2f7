use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the compression library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported model format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("unknown layer kind `{kind}` in format version {version}")]
    UnknownLayer { kind: String, version: u32 },

    #[error("checksum mismatch for blob `{name}` at byte {offset}")]
    Checksum { name: String, offset: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

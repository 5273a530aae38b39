//! Error kinds shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numeric-domain precondition was violated (log of a non-positive
    /// value in strict mode, sqrt of a negative, non-positive step size).
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated (non-scalar backward root, node from a
    /// different tape, invalid scan order).
    #[error("contract error: {0}")]
    Contract(String),

    /// A configuration value is invalid; carries the offending field name.
    #[error("config error: field `{field}`: {msg}")]
    Config { field: String, msg: String },

    /// Non-finite values where finite ones are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// PNG stream decoded but is not 8-bit RGB.
    #[error("unsupported image format: {0}")]
    UnsupportedImage(String),

    /// PNG stream could not be decoded at all.
    #[error("corrupt image stream: {0}")]
    CorruptImage(String),

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("bad checkpoint magic in {0}")]
    BadMagic(PathBuf),

    /// Checkpoint format version is not supported.
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    /// Checkpoint ended before all declared tensor data was read.
    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    /// Loaded weights do not match the target model's key set.
    #[error("checkpoint key mismatch: missing {missing:?}, unexpected {extra:?}")]
    KeyMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    /// A data source required by training is empty.
    #[error("empty data source: {0}")]
    EmptyData(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

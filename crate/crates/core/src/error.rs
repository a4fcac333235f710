//! Crate-wide error type.
//!
//! Variants map one-to-one onto the failure classes the CLI translates into
//! exit codes: configuration and parse problems are usage errors (exit 2),
//! verification failures get their own code (exit 3) and everything else is
//! a runtime error (exit 1).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or image dimensions do not line up.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A byte stream (PGM, manifest, checkpoint) is malformed.
    /// `offset` is the byte position at which parsing failed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// A checkpoint references parameters the model does not have, or is
    /// missing ones it needs.
    #[error("load error: {0}")]
    Load(String),

    /// A forward/backward pass or a training step produced NaN or Inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Numeric verification (finite-difference gradient check) failed.
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse { offset, message: msg.into() }
    }

    pub fn load(msg: impl Into<String>) -> Self {
        Error::Load(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

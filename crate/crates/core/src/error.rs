//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
///
/// Configuration and input problems are separated so callers can distinguish
/// "your config is wrong" from "this particular input is malformed".
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An input (batch, label, file contents) violates a precondition.
    #[error("input error: {0}")]
    Input(String),

    /// A data file does not match the expected binary format.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Training was aborted because the loss or a gradient went non-finite.
    #[error("non-finite loss/gradient at epoch {epoch} batch {batch} (loss={loss})")]
    NonFinite { epoch: usize, batch: usize, loss: f32 },

    /// Checkpoint container is corrupt or from an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for a config error with a formatted message.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Shorthand for an input error with a formatted message.
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}

//! Error taxonomy shared by the whole crate.
//!
//! Variants mirror the failure classes of the public operations: I/O,
//! file format, tensor shape, argument domain, missing runtime state
//! (checkpoints, registry), identifier conflicts and training
//! divergence. The CLI maps `State` to exit code 3 and everything else
//! to exit code 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file decoded but is not in the expected format (e.g. non-RGB raster).
    #[error("format error: {0}")]
    Format(String),

    /// Tensor/latent shape contract violated.
    #[error("shape error: {0}")]
    Shape(String),

    /// Argument outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Required runtime state (checkpoint, registry, ledger) is missing.
    #[error("state error: {0}")]
    State(String),

    /// Identifier already in use.
    #[error("conflict: {0}")]
    Conflict(String),

    /// Checkpoint container malformed or inconsistent with the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

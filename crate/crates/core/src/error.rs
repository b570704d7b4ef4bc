use std::io;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or settings that cannot describe a valid model or dataset.
    #[error("configuration error: {0}")]
    Config(String),

    /// A valid configuration applied to inputs outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A Monte-Carlo sample produced a non-finite utility.
    #[error("non-finite utility in Monte-Carlo sample {sample}")]
    NonFinite { sample: usize },

    /// The requested analysis is not defined for this head variant or noise kind.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step} (epoch {epoch}): loss = {loss}")]
    Divergence { step: u64, epoch: usize, loss: f64 },

    #[error("format version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn domain_err(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

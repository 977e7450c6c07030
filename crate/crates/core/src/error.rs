//! Error type shared by every module of the engine.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {context}")]
    Numeric { context: String },

    /// A configuration value or a combination of values is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called in the wrong state.
    #[error("usage error: {0}")]
    Usage(String),

    /// Streaming input arrived out of protocol (ordering, gaps).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Loaded data violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A line-oriented file could not be parsed.
    #[error("parse error at {path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },

    /// Stored content does not match its integrity hash or is structurally broken.
    #[error("integrity error in {path}: {detail}")]
    Integrity { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric { context: context.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad input or configuration rather than by a fault
    /// inside the engine.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Numeric { .. })
    }
}

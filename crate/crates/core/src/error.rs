//! Error type shared across the crate.

use std::fmt;

/// Everything that can go wrong in the library.
///
/// Variants carry a human-readable message; the enum exists so callers can
/// distinguish shape bugs from protocol misuse from bad input files.
#[derive(Debug)]
pub enum CoreError {
    /// Tensor shapes do not conform (dimension mismatch, bad rank, ...).
    Shape(String),
    /// An argument is outside its documented domain (ratio, index, ...).
    Invalid(String),
    /// Cache or session protocol violated (double populate, missing entry).
    Protocol(String),
    /// Malformed run configuration.
    Config(String),
    /// Malformed or truncated checkpoint file.
    Checkpoint(String),
    /// Training diverged (non-finite loss).
    Diverged(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape(m) => write!(f, "shape error: {m}"),
            CoreError::Invalid(m) => write!(f, "invalid argument: {m}"),
            CoreError::Protocol(m) => write!(f, "protocol error: {m}"),
            CoreError::Config(m) => write!(f, "config error: {m}"),
            CoreError::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            CoreError::Diverged(m) => write!(f, "training diverged: {m}"),
            CoreError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CoreError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CoreError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io(e)
    }
}

//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor operations and model plumbing.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Two operands had incompatible shapes; both are reported.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// An operation produced NaN or Inf; values must stay finite.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// An argument was outside its documented domain.
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    /// A file could not be read or written; the path is always included.
    #[error("{op}: {path}: {msg}")]
    Io {
        op: &'static str,
        path: String,
        msg: String,
    },
}

impl TensorError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::InvalidArg {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(op: &'static str, path: impl Into<String>, err: std::io::Error) -> Self {
        TensorError::Io {
            op,
            path: path.into(),
            msg: err.to_string(),
        }
    }
}

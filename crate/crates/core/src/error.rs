//! Error type shared across the crate.
//!
//! Errors fall into two coarse categories that the command-line harness maps
//! to process exit codes: usage problems (bad parameters, malformed files,
//! mismatched shapes) and numerical failures (divergent solvers, singular or
//! indefinite matrices, non-finite intermediate values).

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Caller gave us something invalid: parameters, shapes, file contents.
    Usage,
    /// The computation itself failed: divergence, singularity, non-finite values.
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (spectral norm of the weight matrix is {spectral_norm:.6})")]
    FixedPointDiverged { spectral_norm: f64, iterations: usize },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("density evaluation failed: {0}")]
    Density(String),

    #[error("gradient tape does not match the forward pass: {0}")]
    TapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidParameter { .. }
            | Error::DimensionMismatch(_)
            | Error::Io { .. }
            | Error::Parse { .. } => ErrorCategory::Usage,
            Error::FixedPointDiverged { .. }
            | Error::Factorization(_)
            | Error::Density(_)
            | Error::TapeMismatch(_)
            | Error::NonFinite(_) => ErrorCategory::Numerical,
        }
    }
}

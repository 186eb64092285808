//! Error type shared by every module, plus a coarse classification used by
//! callers (e.g. a CLI) to pick exit codes.

use thiserror::Error;

/// Coarse failure category. Binaries map these to distinct exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Rejected input: bad configuration, shape mismatch, malformed file.
    Validation,
    /// The operating system said no: missing file, permissions, serialization.
    Io,
    /// The mathematics said no: divergence, singular matrices, failed checks.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a zero vector (norm = {norm:.3e})")]
    ZeroVector { norm: f64 },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("forward cache does not match this model; rerun the forward pass")]
    StaleCache,

    #[error("could not sample well-separated class centers after {attempts} attempts")]
    CenterSamplingFailed { attempts: usize },

    #[error("class {class}: header declares {declared} samples but file contains {actual}")]
    CountMismatch {
        class: usize,
        declared: u64,
        actual: u64,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("within-class scatter is numerically singular (condition estimate {cond:.3e})")]
    SingularScatter { cond: f64 },

    #[error("gradient check failed: {failures} of {cases} cases above tolerance (worst relative error {worst:.3e})")]
    GradCheckFailed {
        failures: usize,
        cases: usize,
        worst: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Parse error helper with a 1-based line number (0 = before any line).
    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidConfig(message.into())
    }

    pub fn shape(expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::ZeroVector { .. }
            | Error::IndexOutOfRange { .. }
            | Error::ShapeMismatch { .. }
            | Error::InvalidConfig(_)
            | Error::StaleCache
            | Error::CountMismatch { .. }
            | Error::Parse { .. } => ErrorClass::Validation,
            Error::Io(_) | Error::Serde(_) => ErrorClass::Io,
            Error::CenterSamplingFailed { .. }
            | Error::NonFiniteLoss { .. }
            | Error::SingularScatter { .. }
            | Error::GradCheckFailed { .. } => ErrorClass::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

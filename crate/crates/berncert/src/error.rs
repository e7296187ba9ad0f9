//! Error type shared across the toolkit.

use std::path::PathBuf;

/// Convenience alias used by every fallible operation in the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type.
///
/// The CLI maps variants onto process exit codes: I/O problems exit with 3,
/// structural constraint violations (for example `d > K`) with 4, and
/// everything that amounts to a bad argument or malformed input with 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Dimension or length mismatch between related arguments.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input that makes an algorithm ill-posed (zero matrix, NaN, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A configured resource cap would be exceeded.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// A structural constraint of the method is violated.
    #[error("constraint violation: {0}")]
    Constraint(String),

    /// A linear system has no unique solution.
    #[error("singular system: {0}")]
    Singular(String),

    /// Malformed file content or inconsistent user-supplied values.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Filesystem failure, annotated with the offending path.
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Attaches the offending path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Csv(_) => 3,
            Error::Constraint(_) => 4,
            _ => 2,
        }
    }
}

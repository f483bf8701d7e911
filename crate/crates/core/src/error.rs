use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
///
/// The variants line up with the process exit codes used by the CLI:
/// configuration problems, data-format problems, and numeric/training
/// failures are kept distinct so callers can react to each.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    Numeric { op: String },

    #[error("linear system is singular after jitter {jitter:e}")]
    Singular { jitter: f64 },

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bundle format error ({field}): {reason}")]
    Format { field: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn numeric(op: impl Into<String>) -> Self {
        Error::Numeric { op: op.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 config, 3 data format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Format { .. }
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::Dimension { .. } => 3,
            Error::Numeric { .. }
            | Error::Singular { .. }
            | Error::Training { .. } => 4,
        }
    }
}

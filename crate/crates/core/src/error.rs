use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SaeError>;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("budget {budget} exceeds selection domain of size {domain}")]
    BudgetExceedsDomain { budget: usize, domain: usize },

    #[error("feature {feature} requests {budget} tokens but the batch only holds {batch}; use a larger minibatch so every feature can be matched")]
    InfeasibleBudget {
        feature: usize,
        budget: usize,
        batch: usize,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("row {row} is constant (zero vector after centering)")]
    DegenerateInput { row: usize },

    #[error("decoder row {row} has zero norm")]
    DegenerateParameter { row: usize },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("density window is empty")]
    EmptyWindow,

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("bad magic in activation file {path:?}")]
    BadMagic { path: PathBuf },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl SaeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SaeError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SaeError::InvalidParameter(msg.into())
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            SaeError::Io { .. }
            | SaeError::BadMagic { .. }
            | SaeError::VersionMismatch { .. }
            | SaeError::UnsupportedDtype(_)
            | SaeError::Truncated { .. }
            | SaeError::Json(_)
            | SaeError::Csv(_) => ErrorKind::Io,
            SaeError::NonFinite { .. }
            | SaeError::DegenerateInput { .. }
            | SaeError::DegenerateParameter { .. }
            | SaeError::InsufficientData { .. }
            | SaeError::EmptyWindow => ErrorKind::Numeric,
            _ => ErrorKind::Usage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Numeric,
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HebaError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("token count {tokens} is not grid_side^2 = {grid_side}^2")]
    NotAGrid { tokens: usize, grid_side: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("cycle detected at node {0}")]
    Cycle(usize),

    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,

    #[error("index {index} out of range for {what} (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl HebaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HebaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        HebaError::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        HebaError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 3 I/O, 4 invariant violation, 5 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HebaError::Io { .. } | HebaError::Json { .. } | HebaError::Format { .. } => 3,
            HebaError::NonFiniteLoss { .. } => 5,
            _ => 4,
        }
    }
}

pub type Result<T, E = HebaError> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the compression toolkit.
///
/// Variants are grouped by category so a front end can map them onto exit
/// codes without string matching (see [`Error::category`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{what} index {index} out of range (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("over-compression: {0}")]
    OverCompression(String),

    #[error("corpus too short: {len} tokens, need at least {needed}")]
    CorpusTooShort { len: usize, needed: usize },

    #[error("missing gradient for trainable parameter {0}")]
    MissingGradient(String),

    #[error("plan does not match model: {0}")]
    PlanMismatch(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error category, stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Numeric,
    Config,
    Data,
    Format,
    Io,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Shape { .. }
            | Error::Index { .. }
            | Error::NonFinite { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NonScalarRoot(_)
            | Error::TapeConsumed
            | Error::MissingGradient(_) => ErrorCategory::Numeric,
            Error::Config(_) | Error::OverCompression(_) | Error::PlanMismatch(_) => {
                ErrorCategory::Config
            }
            Error::CorpusTooShort { .. } => ErrorCategory::Data,
            Error::Format(_) | Error::Version { .. } => ErrorCategory::Format,
            Error::Io { .. } => ErrorCategory::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

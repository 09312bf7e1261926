use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong in this crate.
///
/// The variants fall into three families that the command-line frontend maps
/// onto exit codes: configuration/argument problems, data problems, and
/// numerical failures (see [`Error::category`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("matrix is numerically singular (pivot {pivot:e} at column {column})")]
    Singular { column: usize, pivot: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("non-finite value produced by flow layer {layer}")]
    NumericalOverflow { layer: usize },

    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: usize },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: usize },

    #[error("training diverged at epoch {epoch} step {step}; last epoch log: {last_log}")]
    Divergence {
        epoch: usize,
        step: usize,
        last_log: String,
    },

    #[error("function evaluation failed: {0}")]
    Evaluation(String),

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("incompatible checkpoint version {found} (expected {expected})")]
    IncompatibleVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Argument(_) | Error::Config(_) => ErrorCategory::Usage,
            Error::Singular { .. }
            | Error::NumericalOverflow { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Divergence { .. }
            | Error::Evaluation(_) => ErrorCategory::Numerical,
            Error::DegenerateData(_)
            | Error::DegenerateLabels(_)
            | Error::Parse { .. }
            | Error::Schema(_)
            | Error::Data(_)
            | Error::IncompatibleVersion { .. }
            | Error::Integrity(_)
            | Error::Io { .. } => ErrorCategory::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

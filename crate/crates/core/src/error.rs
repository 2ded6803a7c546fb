use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("{op}: domain error, {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{op}: index {index} out of range (limit {limit})")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("{op}: degenerate batch of {n} samples (need at least 2)")]
    DegenerateBatch { op: &'static str, n: usize },
    #[error("cholesky: non-positive pivot {pivot:e} at column {column}")]
    RankDeficient { column: usize, pivot: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training failed at epoch {epoch}: {reason}")]
    TrainingFailure { epoch: usize, reason: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            msg: msg.into(),
        }
    }
}

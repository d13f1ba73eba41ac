//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Operand shapes are incompatible for an operation. Names both shapes.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Configuration validation. Collects every violated field.
    #[error("invalid configuration: {}", issues.join("; "))]
    InvalidConfig { issues: Vec<String> },

    #[error("unknown sample id {id}")]
    UnknownId { id: usize },

    #[error("duplicate sample id {id}")]
    DuplicateId { id: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{path}:{line}: {msg}")]
    CsvFormat {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("selection is empty: fraction {fraction} of {n} samples rounds to zero")]
    EmptySelection { fraction: f64, n: usize },

    #[error("sample id {id} has zero recorded epochs")]
    ZeroCount { id: usize },

    #[error("cannot normalize: all scores are zero")]
    AllZeroScores,

    #[error("score at index {index} is NaN")]
    NanScore { index: usize },

    #[error("zero variance in {what}")]
    ZeroVariance { what: &'static str },

    #[error("bins must be in [{min}, {n}], got {bins}")]
    BinsOutOfRange { bins: usize, min: usize, n: usize },

    #[error("batch is rank-deficient: smallest singular value {smallest:e}")]
    RankDeficient { smallest: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Single-issue configuration error.
    pub fn config<S: Into<String>>(issue: S) -> Self {
        Error::InvalidConfig {
            issues: vec![issue.into()],
        }
    }
}

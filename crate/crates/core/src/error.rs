use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: String, expected: String },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("non-finite value at flat index {index} (row {row}, column {col})")]
    NonFinite { index: usize, row: usize, col: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("dimensionality mismatch: expected {expected}, found {found} ({context})")]
    Dimension {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no ids shared by all inputs")]
    EmptyIntersection,

    #[error("need at least {need} responses, got {got}")]
    InsufficientResponses { need: usize, got: usize },

    #[error("{estimator} estimator is not applicable to {t}-dimensional responses")]
    EstimatorNotApplicable { estimator: &'static str, t: usize },

    #[error("need at least {need} samples, got {got}: {context}")]
    InsufficientSamples {
        need: usize,
        got: usize,
        context: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("design matrix is rank deficient; use lambda > 0")]
    RankDeficient,

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs or arguments rather than
    /// by a failure inside the pipeline.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Json(_))
    }
}

//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up (reports both shapes).
    #[error("dimension mismatch: {context}: {lhs:?} vs {rhs:?}")]
    Dim {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An id fell outside the valid range.
    #[error("index out of range: {context}: id {id} not in [0, {bound})")]
    Index {
        context: &'static str,
        id: usize,
        bound: usize,
    },

    /// A caller broke an operation contract (non-scalar loss, all-masked row, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Text that does not parse (index files, formulas); line/offset is 0-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// LaTeX tokenization failure, with the byte offset of the offender.
    #[error("tokenization error at byte {offset}: {message}")]
    Tokenize { offset: usize, message: String },

    /// A binary file whose header does not match the expected format.
    #[error("format error in {field}: {message}")]
    Format { field: &'static str, message: String },

    /// A sequence that does not fit the fixed-length layout.
    #[error("length error: {message} (overflow {overflow})")]
    Length { message: String, overflow: usize },

    /// Invalid or inconsistent model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Empty or unusable input where data is required.
    #[error("input error: {0}")]
    Input(String),

    /// A non-finite gradient surfaced during optimization.
    #[error("non-finite gradient for parameter {param}")]
    NonFinite { param: String },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dim {
            context,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

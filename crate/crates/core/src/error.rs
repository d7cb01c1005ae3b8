//! Error type shared by every module in the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },

    #[error("matrix not positive definite even with jitter up to {max_jitter:e}")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("label {label} out of range for {num_classes} classes{location}")]
    LabelOutOfRange {
        label: i64,
        num_classes: usize,
        /// Empty, or " at <file>:<line>" when the label came from disk.
        location: String,
    },

    #[error("alpha_eps must be positive and finite, got {0}")]
    InvalidAlphaEps(f64),

    #[error("non-positive variance {value} at entry {index}")]
    NonPositiveVariance { index: usize, value: f64 },

    #[error("non-positive view weight {value} at entry {index}")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("views disagree on batch size: {sizes:?}")]
    MismatchedBatch { sizes: Vec<usize> },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("confidence {value} outside [0, 1] at entry {index}")]
    ConfidenceOutOfRange { index: usize, value: f64 },

    #[error("missing file: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("{file}:{line}: expected {expected} values per row, found {found}")]
    RaggedRows {
        file: String,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{file}:{line}: column {column}: cannot parse {cell:?} as a number")]
    NonNumericCell {
        file: String,
        line: usize,
        column: usize,
        cell: String,
    },

    #[error("loss became non-finite during epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

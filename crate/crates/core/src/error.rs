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

    #[error("bad magic: {0}")]
    BadMagic(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("ragged rows: row {row} has {found} columns, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-numeric cell at row {row}, column {col}: {value:?}")]
    NonNumeric {
        row: usize,
        col: usize,
        value: String,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },

    #[error("empty file")]
    EmptyFile,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("batch size {batch_size} exceeds dataset size {count}")]
    BatchTooLarge { batch_size: usize, count: usize },

    #[error("degenerate row: {0}")]
    DegenerateRow(String),

    #[error("invalid perplexity {perplexity} for {neighbors} neighbors")]
    InvalidPerplexity { perplexity: f64, neighbors: usize },

    #[error("k = {k} is too large for {n} points")]
    KTooLarge { k: usize, n: usize },

    #[error("edge graph has no positive-weight edges")]
    EmptyGraph,

    #[error("negative pool too small: {node_count} nodes (need at least 7)")]
    NegativePoolTooSmall { node_count: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("non-finite parameter after update: {0}")]
    NonFiniteUpdate(String),

    #[error("labels are required for this operation")]
    MissingLabels,

    #[error("unsupported model format version {0}")]
    VersionUnsupported(u32),

    #[error("corrupt model file: {0}")]
    Corrupt(String),

    #[error("embedding must be 2-dimensional for plotting, got {0}")]
    DimensionNot2(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training aborted at iteration {iteration}: {source}")]
    TrainingAborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable variant name, used by the command-line front end for error reporting.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::BadMagic(_) => "BadMagic",
            Error::Truncated(_) => "Truncated",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::Ragged { .. } => "Ragged",
            Error::NonNumeric { .. } => "NonNumeric",
            Error::NonFiniteInput { .. } => "NonFiniteInput",
            Error::EmptyFile => "EmptyFile",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::BatchTooLarge { .. } => "BatchTooLarge",
            Error::DegenerateRow(_) => "DegenerateRow",
            Error::InvalidPerplexity { .. } => "InvalidPerplexity",
            Error::KTooLarge { .. } => "KTooLarge",
            Error::EmptyGraph => "EmptyGraph",
            Error::NegativePoolTooSmall { .. } => "NegativePoolTooSmall",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::NonFiniteUpdate(_) => "NonFiniteUpdate",
            Error::MissingLabels => "MissingLabels",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::Corrupt(_) => "Corrupt",
            Error::DimensionNot2(_) => "DimensionNot2",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::TrainingAborted { source, .. } => source.name(),
        }
    }
}

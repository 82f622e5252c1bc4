use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {actual}")]
    InputShape { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NumericInput(&'static str),

    #[error("label {label} outside class space of size {num_classes}")]
    LabelDomain { label: usize, num_classes: usize },

    #[error("cannot sample labels: no classes have been observed")]
    EmptySupport,

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("replay weights must be finite and nonnegative (index {index}: {value})")]
    WeightDomain { index: usize, value: f64 },

    #[error("every log-density in the batch is -inf")]
    DegenerateBatch,

    #[error("parameter manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("aggregation weights sum to zero")]
    DegenerateAggregation,

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("not enough classes: need {needed}, pool has {available}")]
    Capacity { needed: usize, available: usize },

    #[error("accuracy matrix is incomplete: {0}")]
    IncompleteMatrix(String),

    #[error("empty task index set")]
    EmptyIndexSet,

    #[error("config error: {0}")]
    Config(String),

    #[error("inventory error: {0}")]
    Inventory(String),

    #[error("I/O error at {path}: {source}")]
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

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::InputShape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors that come from invalid configuration rather than from
    /// running an experiment.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

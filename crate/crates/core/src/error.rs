use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PuError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PuError {
    /// Malformed input file (ragged rows, unparsable numbers, missing columns).
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input whose values violate a domain rule.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty dataset")]
    EmptyDataset,

    /// Invalid configuration value (schedule, ratios, priors, ...).
    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("no labelled positive samples: {0}")]
    NoPositives(String),

    #[error("training diverged: loss is NaN at step {step} (lr = {lr})")]
    NanLoss { step: usize, lr: f64 },

    #[error("missing group annotation for sample ids {0:?}")]
    MissingGroups(Vec<usize>),

    #[error("missing gold labels for sample ids {0:?}")]
    MissingTruth(Vec<usize>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PuError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PuError::Io {
            path: path.into(),
            source,
        }
    }
}

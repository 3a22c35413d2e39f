use std::path::PathBuf;

use crate::backbone::TapId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error in stage `{stage}`: {reason}")]
    StageGeometry { stage: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: String, found: String },

    #[error("non-finite value at tap {tap}: {what}")]
    NonFinite { tap: TapId, what: String },

    #[error("synthesis diverged at iteration {iteration}: {what}")]
    Diverged { iteration: usize, what: String },

    #[error("weights load error: {0}")]
    WeightsFormat(String),

    #[error("weights shape mismatch in stage `{stage}`: expected {expected:?}, found {found:?}")]
    WeightsShape {
        stage: String,
        expected: Vec<u32>,
        found: Vec<u32>,
    },

    #[error("container format error: {0}")]
    Format(String),

    #[error("ICA fit failed: centered data has effective rank {rank}, need {requested} components")]
    InsufficientRank { rank: usize, requested: usize },

    #[error("component index {index} out of range (model has {count})")]
    ComponentOutOfRange { index: usize, count: usize },

    #[error("explained variance undefined: data matrix has zero Frobenius norm")]
    ZeroNorm,

    #[error("no image passes every tap threshold at percentile {percentile}; try a larger percentile")]
    EmptySelection { percentile: f64 },

    #[error("corpus extraction failed for {} image(s): {}", .0.len(), .0.iter().map(|(id, e)| format!("{id}: {e}")).collect::<Vec<_>>().join("; "))]
    Corpus(Vec<(String, String)>),

    #[error("staircase error: {0}")]
    Staircase(String),

    #[error("insufficient reversals: have {have}, need {need}")]
    InsufficientReversals { have: usize, need: usize },

    #[error("session plan exhausted after {0} trials")]
    PlanExhausted(usize),

    #[error("missing threshold cells: {0}")]
    MissingCells(String),

    #[error("synthesis failure rate {rate:.3} exceeds limit for {context}")]
    SynthesisFailureRate { rate: f64, context: String },

    #[error("provenance check failed: {0}")]
    Provenance(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn dim(expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

/// [`Error::Io`] for callers outside the crate.
pub fn io_error(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
    Error::io(path, source)
}

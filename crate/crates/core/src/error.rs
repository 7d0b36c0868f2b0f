use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MistError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MistError {
    #[error("dimension mismatch: expected length {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("layer shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid layer dims {0:?}: need at least an input and an output layer, all positive")]
    InvalidLayerDims(Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite parameter produced at index {index}")]
    NonFiniteParameter { index: usize },

    #[error("cannot average an empty list of models")]
    NoModels,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot split {items} items into {parts} nonempty subsets")]
    TooManySubsets { parts: usize, items: usize },

    #[error("insufficient IN/OUT shadow coverage (need >= {required} of each) for {} instances: {ids:?}", ids.len())]
    InsufficientCoverage { required: usize, ids: Vec<usize> },

    #[error("need at least {required} {side} scores, got {actual}")]
    TooFewScores {
        side: &'static str,
        required: usize,
        actual: usize,
    },

    #[error("no shadow record for instance {0}")]
    MissingRecord(usize),

    #[error("requested top {requested} of only {available} instances")]
    TopKTooLarge { requested: usize, available: usize },

    #[error("metrics need at least one member and one non-member score")]
    EmptySide,
}

impl MistError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MistError::Io {
            path: path.into(),
            source,
        }
    }
}

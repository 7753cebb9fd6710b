use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: payload holds {actual} bytes, header implies {expected}")]
    DimMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("{path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("label {label} has no palette entry")]
    MissingPaletteEntry { label: u16 },

    #[error("patch side {patch} exceeds scene {height}x{width}")]
    PatchTooLarge {
        patch: usize,
        height: usize,
        width: usize,
    },

    #[error("patch side {0} is odd; a single Haar level needs even sides")]
    OddPatch(usize),

    #[error("plane dimension {rows}x{cols} is not even on both sides")]
    OddDimension { rows: usize, cols: usize },

    #[error("class {0} has no samples")]
    EmptyClass(u16),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("target {target} outside [0, {classes})")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("class id {id} outside [0, {classes})")]
    IdOutOfRange { id: usize, classes: usize },

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("{0} split is empty")]
    EmptySplit(&'static str),

    #[error("invalid WMCK checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: layer {index} ({layer}) {reason}")]
    InvalidSpec {
        index: usize,
        layer: String,
        reason: String,
    },

    #[error("shape mismatch at {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("incongruent {what}: {detail}")]
    Incongruent { what: &'static str, detail: String },

    #[error("fraction {0} out of range [0, 100)")]
    FractionOutOfRange(f64),

    #[error("model has no batch-norm layers to rank channels by")]
    NoBatchNorm,

    #[error("client {client} diverged in round {round}: non-finite loss")]
    Diverged { client: usize, round: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated, needed {needed} bytes but file has {available}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        available: usize,
    },

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: size {size} is not a multiple of the {record}-byte record")]
    RecordSize {
        path: PathBuf,
        size: usize,
        record: usize,
    },

    #[error("insufficient data: partition needs {required} examples, dataset has {available}")]
    InsufficientData { required: usize, available: usize },

    #[error("config: {key}: {reason}")]
    Config { key: String, reason: String },

    #[error("arithmetic overflow in {0}")]
    Overflow(&'static str),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user configuration rather than the run itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

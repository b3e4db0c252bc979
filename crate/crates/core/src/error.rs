use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: empty batch")]
    EmptyBatch { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tape: {0}")]
    Tape(String),

    #[error("modulation does not fit the network: {0}")]
    ModulationMismatch(String),

    #[error("non-finite loss {loss} at step {step}")]
    Divergence { step: usize, loss: f64 },

    #[error("dataset has no labels")]
    MissingLabels,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("pixel value {value} at index {index} is outside [0, 1]")]
    PixelRange { index: usize, value: f32 },

    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),

    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

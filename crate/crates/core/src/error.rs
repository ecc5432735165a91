use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: feature dimension mismatch in face {face_id}: expected {expected}, got {got}")]
    DimensionMismatch {
        line: usize,
        face_id: String,
        expected: usize,
        got: usize,
    },

    #[error("line {line}: image {image_id}: image label violates max rule (label {label}, max face label {expected})")]
    LabelRule {
        line: usize,
        image_id: String,
        label: u8,
        expected: u8,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("vector norm {norm:e} below {min:e}: {context}")]
    NearZeroNorm { norm: f64, min: f64, context: String },

    #[error("degenerate prototype: {0}")]
    DegeneratePrototype(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

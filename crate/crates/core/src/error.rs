use std::path::PathBuf;

use thiserror::Error;

use crate::ClassId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual} ({context})")]
    Shape {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("label {label} outside 1..={num_classes}")]
    Label { label: usize, num_classes: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("stream error: {0}")]
    Stream(String),

    #[error("format error at row {row}: {message}")]
    Format { row: usize, message: String },

    #[error("class {0} has no exemplars in memory")]
    MissingClass(ClassId),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("non-finite value detected: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
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

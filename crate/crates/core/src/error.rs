use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("mask grid is empty")]
    EmptyGrid,
    #[error("expected {expected} mask values, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("mask is not binary; offending values: {values:?}")]
    NonBinary { values: Vec<u8> },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Label(#[from] LabelError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("run failed: {0}")]
    Run(String),

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

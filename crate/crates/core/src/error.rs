use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at `{key}`: {message}")]
    Parse {
        path: PathBuf,
        key: String,
        message: String,
    },

    #[error("referential integrity violated: {0}")]
    Integrity(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsatisfiable noise specification: {0}")]
    Unsatisfiable(String),

    #[error("duplicate registry write for image {image_id} at epoch {epoch}")]
    DuplicateRecord { image_id: u64, epoch: u32 },

    #[error("dataset mismatch: {0}")]
    Mismatch(String),

    #[error("training diverged at epoch {epoch}, step {step} (image {image_id}): {diagnostic}")]
    Diverged {
        epoch: u32,
        step: usize,
        image_id: u64,
        diagnostic: String,
    },

    #[error("unsupported image source `{0}`")]
    ImageSource(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

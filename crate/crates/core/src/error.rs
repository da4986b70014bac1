use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unreadable file {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },

    #[error("non-3D image: {0} dimensions")]
    NotThreeDimensional(usize),

    #[error("unknown datatype code {0}")]
    UnknownDatatype(i16),

    #[error("volume contains non-finite values")]
    NonFinite,

    #[error("index {index} out of range for axis of length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("not enough subjects: have {have}, need {need}")]
    InsufficientSubjects { have: usize, need: usize },

    #[error("not enough donor subjects for similar-slice priors: have {have}, need {need}")]
    InsufficientDonors { have: usize, need: usize },

    #[error("subject {subject} has no {contrast} volume")]
    MissingContrast { subject: String, contrast: String },

    #[error("unknown subject {0}")]
    UnknownSubject(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid motion trace: {0}")]
    Trace(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

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
}

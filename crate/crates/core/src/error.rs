use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the camouflage attack library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported output format for {0}: adversarial images must be written losslessly (png)")]
    LossyFormat(PathBuf),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("invalid label {label} for a classifier with {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("invalid attack mode: {0}")]
    InvalidMode(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("transformed foreground does not fit the background: {0}")]
    PlacementOutOfBounds(String),
    #[error("non-finite loss at lambda {lambda}, iteration {iteration}: {breakdown}")]
    NonFiniteLoss {
        lambda: f64,
        iteration: usize,
        breakdown: String,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("weights file {path}: {reason}")]
    Weights { path: PathBuf, reason: String },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("report sink failed: {0}")]
    Sink(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path.into())
        } else {
            Error::Io {
                path: path.into(),
                source,
            }
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("dataset ingestion failed for {} record(s): {}", .0.len(), .0.join("; "))]
    Ingestion(Vec<String>),

    #[error("prompt quality is undefined for an empty ground-truth mask")]
    UndefinedQuality,

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("could not parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    /// Errors caused by the caller (bad config, missing inputs) rather than by
    /// an internal failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::ShapeMismatch { .. }
                | Error::Config(_)
                | Error::Ingestion(_)
                | Error::UndefinedQuality
                | Error::Parse { .. }
                | Error::Checkpoint { .. }
        ) || matches!(self, Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound)
    }
}

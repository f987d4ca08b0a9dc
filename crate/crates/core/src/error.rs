use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("point is not visible from the camera (camera depth {0})")]
    NotVisible(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("gradient buffer layout does not match the grid")]
    Layout,

    #[error("non-finite value in {what} at {location}")]
    NonFinite { what: String, location: String },

    #[error("non-finite gradient in channel {0}")]
    NonFiniteGradient(&'static str),

    #[error("divergence at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("cancelled")]
    Cancelled,

    #[error("missing files: {}", .0.join(", "))]
    MissingFiles(Vec<String>),

    #[error("invalid format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

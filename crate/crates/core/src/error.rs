use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("position ({:.6}, {:.6}, {:.6}) lies outside the field bounds", .0[0], .0[1], .0[2])]
    OutOfBounds([f64; 3]),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("loss mode `{mode}` cannot be trained on {kind} targets")]
    ModeMismatch { mode: String, kind: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("non-finite loss at iteration {iteration} (rays {rays:?})")]
    NonFiniteLoss { iteration: usize, rays: Vec<usize> },

    #[error("non-finite parameter at iteration {iteration}")]
    NonFiniteParameter { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

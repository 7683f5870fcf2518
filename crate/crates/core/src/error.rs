use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x}, {y}, {w}, {h}): width and height must be positive and finite")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },

    #[error("intersection too small: {width}x{height} cannot hold a {min_w}x{min_h} box")]
    IntersectionTooSmall {
        width: f64,
        height: f64,
        min_w: f64,
        min_h: f64,
    },

    #[error("sampling starved: no box accepted after {attempts} attempts")]
    SamplingStarved { attempts: usize },

    #[error("box not visible in view: {0}")]
    BoxNotVisible(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("batch norm in training mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid roi batch index {index} for batch of {batch}")]
    RoiBatchIndex { index: usize, batch: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numeric failures map to exit code 2 in the CLI; everything else is a usage/IO problem.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

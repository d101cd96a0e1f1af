use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the function it was passed to.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate view frame: phi1 = {phi1} rad is too close to the optical axis")]
    DegenerateFrame { phi1: f64 },

    #[error("box orientation is undefined for a box centered on the fisheye center")]
    DegenerateOrientation,

    #[error("object lies entirely outside the fisheye field of view")]
    OutOfView,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("exemplar cache {path} was built for a different configuration (hash {found}, expected {expected})")]
    CacheMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("evaluation is undefined without ground truth")]
    NoGroundTruth,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True for errors caused by the configuration rather than by input data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::CacheMismatch { .. } | Error::DegenerateFrame { .. })
    }
}

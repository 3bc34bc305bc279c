use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("invalid dimensions {width}x{height}: {reason}")]
    InvalidDimensions {
        width: usize,
        height: usize,
        reason: &'static str,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("label ids are not contiguous: missing id {missing}")]
    MissingId { missing: u32 },

    #[error("point ({x}, {y}) out of bounds for {width}x{height}")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("ground truth is fully covered by the prediction")]
    FullyCovered,

    #[error("optimization diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("could not place shape {shape} after {attempts} attempts")]
    Placement { shape: usize, attempts: usize },

    #[error("degenerate polygon {index}: fewer than 3 distinct vertices")]
    DegeneratePolygon { index: usize },

    #[error("too many instances: {0} (limit 65535)")]
    TooManyInstances(usize),

    #[error("{path}: truncated at byte offset {offset}")]
    Truncated { path: PathBuf, offset: usize },

    #[error("{path}: corrupt file: {reason}")]
    Corrupt { path: PathBuf, reason: String },

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

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions {width}x{height}")]
    Dimensions { width: usize, height: usize },

    #[error("dimension mismatch: {left_width}x{left_height} vs {right_width}x{right_height}")]
    DimensionMismatch {
        left_width: usize,
        left_height: usize,
        right_width: usize,
        right_height: usize,
    },

    #[error("data length {actual} does not match {width}x{height}")]
    DataLength {
        width: usize,
        height: usize,
        actual: usize,
    },

    #[error("class {class} out of range (class count {count})")]
    ClassOutOfRange { class: u8, count: usize },

    #[error("class {0} not covered by remap")]
    UnmappedClass(u8),

    #[error("too many instances: {0} exceeds the 16-bit limit")]
    TooManyInstances(usize),

    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvalidBox {
        x_min: i64,
        y_min: i64,
        x_max: i64,
        y_max: i64,
    },

    #[error("box lies outside {width}x{height} bounds")]
    BoxOutOfBounds { width: usize, height: usize },

    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),

    #[error("segments of mixed classes passed to matching")]
    MixedClasses,

    #[error("accumulator configurations differ")]
    ConfigMismatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("could not place {what} after {attempts} attempts")]
    Capacity { what: String, attempts: usize },

    #[error("{path}: expected {expected}-bit samples, found {found}-bit")]
    BitDepth {
        path: PathBuf,
        expected: u8,
        found: u8,
    },

    #[error("{path}: expected a single channel image, found {found} channels")]
    ChannelCount { path: PathBuf, found: usize },

    #[error("{path}: truncated or corrupt image data: {reason}")]
    Truncated { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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

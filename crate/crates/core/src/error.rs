//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Tensor or layer extents do not compose.
    ShapeMismatch(String),
    /// Convolution stride must be >= 1.
    InvalidStride(usize),
    /// A NaN or infinity reached a numeric operation.
    NonFinite(String),
    /// An ANN cannot convert because an activation threshold is not positive.
    UnfinalizedParams(String),
    /// Residual statistics do not cover every activation layer.
    MissingLayer(String),
    /// A stratified split needs at least two samples per class.
    EmptyClass(usize),
    /// Image and label files disagree on sample count.
    CountMismatch { images: usize, labels: usize },
    /// Malformed model or dataset file.
    Format(String),
    /// Invalid configuration value.
    Config(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidStride(s) => write!(f, "invalid stride {s}: must be >= 1"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::UnfinalizedParams(msg) => write!(f, "unfinalized parameters: {msg}"),
            Error::MissingLayer(msg) => write!(f, "missing layer: {msg}"),
            Error::EmptyClass(c) => write!(f, "class {c} has fewer than 2 samples"),
            Error::CountMismatch { images, labels } => {
                write!(f, "count mismatch: {images} images vs {labels} labels")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

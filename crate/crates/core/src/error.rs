use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is zero or degenerate")]
    ZeroNorm,

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    DivergenceDetected { iteration: usize, loss: f64 },

    #[error("score set has no {0} scores")]
    EmptyScores(&'static str),

    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),

    #[error("landmark {index} at ({x}, {y}) lies outside a {width}x{height} image")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("checksum mismatch (file truncated or corrupted)")]
    CrcMismatch,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("dimension mismatch: header says {expected}, record has {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("duplicate record {0}")]
    DuplicateRecord(String),

    #[error("missing record {0}")]
    MissingRecord(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for errors caused by the filesystem or unreadable/corrupt files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::BadMagic { .. }
                | Error::CrcMismatch
                | Error::UnsupportedVersion(_)
                | Error::Csv(_)
                | Error::Image(_)
        )
    }
}

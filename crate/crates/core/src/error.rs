use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid dimensions {width}x{height}: {reason}")]
    InvalidDimensions {
        width: usize,
        height: usize,
        reason: &'static str,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("downsampled size {width}x{height} is below 2x2")]
    DegenerateSize { width: usize, height: usize },

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("tensor shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("checkpoint does not match model config: {0}")]
    ConfigMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("sequence too short: need at least {needed} frames, got {got}")]
    SequenceTooShort { needed: usize, got: usize },

    #[error("crop {crop_w}x{crop_h} larger than frame {width}x{height}")]
    CropTooLarge {
        crop_w: usize,
        crop_h: usize,
        width: usize,
        height: usize,
    },

    #[error("non-finite loss at training step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("bad magic in flow file: expected \"PIEH\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteLoss { .. })
    }

    /// True for errors originating in file IO or parsing.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::BadMagic(_)
                | Error::Truncated { .. }
                | Error::Json(_)
        )
    }
}

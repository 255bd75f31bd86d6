//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// Non-finite values produced inside the reconstruction loop, with the
    /// iteration and frame where they first appeared.
    #[error("non-finite values at iteration {iteration}, frame {frame}")]
    NumericFailureAt { iteration: usize, frame: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png decode error: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T> = std::result::Result<T, Error>;

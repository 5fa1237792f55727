use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("AER byte length {0} is not a multiple of 8")]
    TruncatedRecord(usize),

    #[error("event at (x={x}, y={y}) outside {width}x{height} sensor")]
    OutOfBounds {
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },

    #[error("invalid aggregation window: {0}")]
    InvalidWindow(String),

    #[error("bad configuration: {0}")]
    BadConfig(String),

    #[error("non-positive input: {0}")]
    NonPositiveInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("loss node has {0} elements, expected a scalar")]
    NonScalarLoss(usize),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("length plan mismatch: {0}")]
    PlanMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

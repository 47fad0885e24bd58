use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the codec library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (shapes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid autodiff state: {0}")]
    State(String),

    #[error("image {height}x{width} is too small for {scales} MS-SSIM scales (needs min side >= {needed})")]
    ScaleCount {
        height: usize,
        width: usize,
        scales: usize,
        needed: usize,
    },

    #[error("frame dimensions {height}x{width} must be divisible by 8; pad the input first")]
    PaddingRequired { height: usize, width: usize },

    #[error("zero_fill needs at least one channel")]
    EmptyPrefix,

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated stream at byte offset {offset}: {detail}")]
    Truncated { offset: usize, detail: String },

    #[error("corrupt stream: {0}")]
    Corrupt(String),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("RD curves do not overlap in distortion")]
    NoOverlap,

    #[error("RD curve needs at least 4 points, got {0}")]
    InsufficientPoints(usize),

    #[error("dataset at {} contains no usable images", .0.display())]
    EmptyDataset(PathBuf),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },

    #[error("{}: {detail}", path.display())]
    File { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

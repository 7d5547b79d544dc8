use std::io;

use thiserror::Error;

use crate::defocus_sim::DepthUnit;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data length {actual} does not match {height}x{width}x{channels}")]
    DataLength {
        height: usize,
        width: usize,
        channels: usize,
        actual: usize,
    },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("kernel of radius {radius} does not fit a {height}x{width} image")]
    KernelTooLarge {
        radius: usize,
        height: usize,
        width: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("nonpositive depth {value} at (row {row}, col {col})")]
    NonPositiveDepth { row: usize, col: usize, value: f64 },
    #[error("unit mismatch: prediction is {pred:?}, ground truth is {gt:?}")]
    UnitMismatch { pred: DepthUnit, gt: DepthUnit },
    #[error("unsupported color type {0}")]
    UnsupportedColorType(String),
    #[error("unsupported bit depth {0}")]
    UnsupportedBitDepth(u8),
    #[error("png decode: {0}")]
    PngDecode(String),
    #[error("png encode: {0}")]
    PngEncode(String),
    #[error("malformed pfm: {0}")]
    Pfm(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

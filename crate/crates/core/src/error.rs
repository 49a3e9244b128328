use std::io;

use thiserror::Error;

/// Failures raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward already ran on this tape; reset it before reusing")]
    BackwardTwice,
    #[error("variable #{index} does not belong to this tape (detached)")]
    DetachedVar { index: usize },
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("event #{index} at ({x}, {y}) lies outside the {width}x{height} sensor")]
    EventOutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },
    #[error("event #{index} has timestamp {t} earlier than its predecessor {previous}")]
    UnsortedEvents { index: usize, t: u64, previous: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0}: mask selects no valid pixels")]
    EmptyMask(&'static str),
    #[error("non-finite loss {value} at sample #{sample}")]
    NonFiniteLoss { sample: usize, value: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

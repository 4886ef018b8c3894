use std::io;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: {channels} channels are not divisible by {groups} groups")]
    GroupDivisibility {
        op: &'static str,
        channels: usize,
        groups: usize,
    },

    #[error("{op}: spatial size {height}x{width} is not divisible by {factor}")]
    Divisibility {
        op: &'static str,
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("{op}: signal length {len} must be even")]
    OddLength { op: &'static str, len: usize },

    #[error("non-finite value produced by `{op}` (node {node}{label})")]
    NonFinite {
        op: &'static str,
        node: usize,
        label: String,
    },

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures caused by bad inputs (files, flags, shapes) rather
    /// than by the numerics of a run.
    pub fn is_usage(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::Io(_))
    }
}

//! Error type shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An operation was given tensors whose shapes do not conform to its rule.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// A block index outside `1..=L+1` was requested.
    InvalidBlockIndex { index: usize, max: usize },
    /// A configuration field failed validation.
    InvalidConfig(String),
    /// A gradient or loss became non-finite where that is a hard error.
    NonFinite(&'static str),
    /// Generic precondition failure with context.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::InvalidBlockIndex { index, max } => {
                write!(f, "block index {index} out of range 1..={max}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

impl core::error::Error for Error {}

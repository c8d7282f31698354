//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// An input that must contain at least one element was empty.
    Empty(&'static str),
    /// A numeric input contained NaN or infinity.
    NonFiniteInput,
    /// Operand dimensions are inconsistent.
    ShapeMismatch(String),
    /// A renormalized sparse attention call selected no positions.
    EmptyAttentionSupport,
    /// A cache append would exceed the model's maximum sequence length.
    ContextOverflow,
    /// A per-layer mask does not match the cache length it applies to.
    MaskLength { expected: usize, got: usize },
    /// A parameter is outside its documented range.
    InvalidArgument(String),
    /// A CSR mask violates its structural invariants.
    MalformedCsr(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Empty(what) => write!(f, "empty {what}"),
            Error::NonFiniteInput => write!(f, "non-finite input"),
            Error::ShapeMismatch(detail) => write!(f, "shape mismatch: {detail}"),
            Error::EmptyAttentionSupport => write!(f, "empty attention support"),
            Error::ContextOverflow => write!(f, "context overflow"),
            Error::MaskLength { expected, got } => {
                write!(f, "mask length mismatch: expected {expected}, got {got}")
            }
            Error::InvalidArgument(detail) => write!(f, "{detail}"),
            Error::MalformedCsr(detail) => write!(f, "malformed csr mask: {detail}"),
        }
    }
}

impl core::error::Error for Error {}

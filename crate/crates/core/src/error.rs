//! Crate-wide error type.

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the tensor engine, data pipeline, and training stack.
#[derive(Debug)]
pub enum Error {
    /// Two operands had incompatible shapes for an operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A single tensor had a shape the operation cannot accept.
    BadShape { op: &'static str, detail: String },
    /// Softmax or aggregation over a fully masked support.
    EmptySupport(&'static str),
    /// Zero-norm vector fed to a similarity that divides by the norm.
    DegenerateVector(&'static str),
    /// A contract violation outside the shape system (non-scalar loss,
    /// duplicate candidates, batch too small, ...).
    Contract(String),
    /// Malformed input data with the offending line number (1-based).
    Parse { line: usize, msg: String },
    /// Configuration problem, naming the key at fault.
    Config { key: String, msg: String },
    /// Negative-sampling pool smaller than the requested sample.
    PoolTooSmall { need: usize, have: usize },
    /// Checkpoint manifest or payload rejected on load.
    Checkpoint(String),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::BadShape { op, detail } => write!(f, "{op}: {detail}"),
            Error::EmptySupport(op) => write!(f, "{op}: no unmasked entries"),
            Error::DegenerateVector(op) => write!(f, "{op}: zero-norm vector"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Config { key, msg } => write!(f, "config key `{key}`: {msg}"),
            Error::PoolTooSmall { need, have } => {
                write!(f, "negative pool too small: need {need}, have {have}")
            }
            Error::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            Error::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

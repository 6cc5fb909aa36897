use alloc::string::String;
use thiserror::Error;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("duplicate code `{0}`")]
    DuplicateCode(String),

    #[error("empty code string")]
    EmptyCode,

    #[error("unknown code `{0}`")]
    UnknownCode(String),

    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("tree position capacity exceeded (n = {n}, k = {k}): {reason}")]
    Capacity {
        n: usize,
        k: usize,
        reason: &'static str,
    },

    #[error("cannot move up from the root position")]
    Underflow,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("singular system in {0}")]
    Singular(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(
    op: &'static str,
    left: (usize, usize),
    right: (usize, usize),
) -> Error {
    Error::Shape {
        op,
        left: alloc::format!("{}x{}", left.0, left.1),
        right: alloc::format!("{}x{}", right.0, right.1),
    }
}

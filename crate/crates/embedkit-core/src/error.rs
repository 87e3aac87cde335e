use alloc::string::String;
use alloc::vec::Vec;

/// Everything that can go wrong in the numeric core.
///
/// Variants carry enough context to point at the offending input; callers
/// that need positional detail (file, line) add it at the IO layer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch for {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("zero-norm vector in {0}; cosine similarity is undefined")]
    ZeroNorm(&'static str),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("unknown name: {0}")]
    UnknownName(String),

    #[error("duplicate name: {0}")]
    DuplicateName(String),

    #[error("no teacher registered for language {0:?} and no default set")]
    MissingTeacher(String),

    #[error("malformed archive: {0}")]
    MalformedArchive(String),

    #[error("archive checksum mismatch: header says {expected}, payload hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    /// Shorthand used all over the crate for parameter validation.
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }
}

//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SorcenError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("token id {id} at position {position} is out of range for vocabulary {vocab}")]
    TokenOutOfRange { id: u32, position: usize, vocab: u32 },

    #[error("payload length mismatch: expected {expected} bytes, got {actual}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("bad magic: expected {expected:?}, got {actual:?}")]
    BadMagic { expected: [u8; 4], actual: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u16),

    #[error("record count mismatch: header says {header}, found {actual}")]
    CountMismatch { header: u64, actual: u64 },

    #[error("vocabulary mismatch: dataset has {dataset}, model has {model}")]
    VocabMismatch { dataset: u32, model: u32 },

    #[error("non-finite value in {context}{}", coordinate.map(|c| format!(" at coordinate {c}")).unwrap_or_default())]
    NonFinite { context: String, coordinate: Option<usize> },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl SorcenError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SorcenError::Io { path: path.into(), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        SorcenError::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, SorcenError>;

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("signature bit length mismatch: {left} vs {right}")]
    BitLenMismatch { left: usize, right: usize },

    #[error("non-finite value {value} at index {index}")]
    NonFinite { value: f64, index: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backward tape already consumed")]
    TapeConsumed,

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: [u8; 4] },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: checksum mismatch, stored {stored:#010x} computed {computed:#010x}")]
    ChecksumMismatch {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("{path}: truncated at offset {offset}: need {needed} bytes, {available} available")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("{path}: {message} (at offset {offset})")]
    Malformed {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("training aborted: {reason}; last good checkpoint: {last_good:?}")]
    TrainAborted {
        reason: String,
        last_good: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

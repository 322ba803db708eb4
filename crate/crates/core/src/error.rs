use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the numeric core, the MIL engine, data generation and bag storage.
#[derive(Debug, Error)]
pub enum MilError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("empty bag `{0}`")]
    EmptyBag(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("gradient accumulator is full ({0} bags); apply it first")]
    AccumulatorFull(usize),

    #[error("bag file {path}: bad magic {found:?} at byte 0")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("bag file {path}: unsupported format version {version} at byte {offset}")]
    Version {
        path: PathBuf,
        version: u16,
        offset: u64,
    },

    #[error("bag file {path}: unknown encoding tag {tag} at byte {offset}")]
    Encoding { path: PathBuf, tag: u8, offset: u64 },

    #[error("bag file {path}: truncated record for bag {bag_index} at byte {offset}")]
    Truncated {
        path: PathBuf,
        bag_index: u32,
        offset: u64,
    },

    #[error("bag file {path}: malformed record for bag {bag_index} at byte {offset}: {reason}")]
    Malformed {
        path: PathBuf,
        bag_index: u32,
        offset: u64,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MilError> = std::result::Result<T, E>;

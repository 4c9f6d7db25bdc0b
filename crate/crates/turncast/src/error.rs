//! Crate-wide error type. Each failure mode named by the module contracts
//! maps to its own variant so callers can match on the exact condition.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("negative time {0} s")]
    NegativeTime(f64),

    #[error("invalid frame rate: {0}")]
    InvalidFps(String),

    #[error("invalid segment [{start_s}, {end_s})")]
    InvalidSegment { start_s: f64, end_s: f64 },

    #[error("segments must be sorted and non-overlapping (violation near index {index})")]
    UnsortedSegments { index: usize },

    #[error("frame {index} out of bounds for track of {len} frames")]
    FrameOutOfBounds { index: usize, len: usize },

    #[error("frame rate mismatch: {a} fps vs {b} fps")]
    FpsMismatch { a: u32, b: u32 },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated file: expected {expected} more bytes for {context}")]
    Truncated {
        expected: usize,
        context: &'static str,
    },

    #[error("non-finite value at index {index} ({context})")]
    NonFinite { index: usize, context: &'static str },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("silence interval {silence_ms} ms is not a whole number of frames at {fps} fps")]
    SilenceNotFrameAligned { silence_ms: u32, fps: u32 },

    #[error("training diverged at epoch {epoch}, iter {iter} (loss {loss})")]
    TrainingDiverged { epoch: usize, iter: usize, loss: f64 },

    #[error("non-finite intermediate in parameter block `{block}` during backward pass")]
    NonFiniteGradient { block: &'static str },

    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Streaming speech-initiation prediction engine and evaluation toolkit.
//!
//! The pipeline: transcripts or voice-activity spans become per-frame
//! three-way labels (background / target speaker / other speaker) at a fixed
//! frame rate; an online recurrent model consumes per-frame feature streams
//! and emits, for every frame, a `[horizon x 3]` probability tensor over the
//! next `horizon` frames; anticipatory per-frame average precision scores
//! the predictions per class and per future offset. Non-learned baselines
//! (uniform-random and silence-triggered) and runtime benchmarking round out
//! the toolkit.

pub mod baselines;
pub mod bench;
pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
pub mod labeling;
pub mod linalg;
pub mod model;
pub mod timebase;
pub mod training;

pub use error::{Error, Result};

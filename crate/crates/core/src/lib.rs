//! Device-specific IoT traffic models and decoy flow synthesis.

pub mod adversary;
pub mod durations;
pub mod error;
pub mod ingest;
pub mod jsonl;
pub mod nn;
pub mod pipeline;
pub mod reconstruct;
pub mod seed;
pub mod seqgan;
pub mod signatures;
pub mod synthesize;
pub mod vqstae;

pub use error::{Error, Result};

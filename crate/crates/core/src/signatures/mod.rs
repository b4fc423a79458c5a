//! Packet-level signature mining and frame tokens.
//!
//! A signature is a short ordered list of frame-length ranges with
//! directions, found as dense clusters of length/direction subarrays. Windows
//! are decomposed into non-overlapping signature occurrences plus orphan
//! packets, and every (signature, position) slot or orphan (length,
//! direction) pair gets its own frame token.

pub mod dbscan;
mod distance;
mod extract;
mod matching;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use distance::{signature_distance, Distance};
pub use extract::extract_signatures;
pub use matching::{
    count_occurrences, count_support, match_flow, match_window, rank_signatures,
    SignatureAssignment, Slot,
};
pub use vocab::{
    build_frame_vocab, tokenize_window, FrameTokenKind, FrameVocab, SignatureSlot,
    TokenizedPacket, TokenizedWindow,
};

use crate::durations::DurationModel;
use crate::error::{Error, Result};
use crate::ingest::Direction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignatureConfig {
    /// Neighborhood radius.
    pub d: f64,
    /// Minimum samples for a core point.
    pub s: usize,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for SignatureConfig {
    fn default() -> Self {
        SignatureConfig {
            d: 10.0,
            s: 5,
            min_size: 2,
            max_size: 6,
        }
    }
}

impl SignatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0) || !self.d.is_finite() {
            return Err(Error::Config(format!("signature distance must be > 0, got {}", self.d)));
        }
        if self.s < 2 {
            return Err(Error::Config(format!("minimum samples must be >= 2, got {}", self.s)));
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return Err(Error::Config(format!(
                "signature sizes must satisfy 2 <= min <= max, got {}..{}",
                self.min_size, self.max_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SignatureRange {
    pub min_len: u32,
    pub max_len: u32,
    pub direction: Direction,
}

impl SignatureRange {
    pub fn contains(&self, frame_length: u32, direction: Direction) -> bool {
        direction == self.direction && (self.min_len..=self.max_len).contains(&frame_length)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub signature_id: u32,
    pub ranges: Vec<SignatureRange>,
    pub support_count: usize,
}

impl Signature {
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn matches(&self, packets: &[(u32, Direction)]) -> bool {
        packets.len() == self.ranges.len()
            && self
                .ranges
                .iter()
                .zip(packets)
                .all(|(r, &(len, dir))| r.contains(len, dir))
    }
}

pub const ARTIFACT_VERSION: u32 = 1;

/// Versioned document holding everything needed to tokenize and detokenize a
/// device's windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureArtifact {
    pub version: u32,
    pub device_id: String,
    pub config: SignatureConfig,
    pub signatures: Vec<Signature>,
    pub vocab: FrameVocab,
    pub durations: DurationModel,
}

impl SignatureArtifact {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let artifact: SignatureArtifact = crate::jsonl::read_json(path)?;
        if artifact.version != ARTIFACT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported artifact version {}",
                path.display(),
                artifact.version
            )));
        }
        Ok(artifact)
    }
}

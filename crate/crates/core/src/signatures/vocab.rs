use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::matching::{SignatureAssignment, Slot};
use super::Signature;
use crate::durations::DurationModel;
use crate::ingest::{Direction, ProtocolFlags, TrafficWindow};

/// A frame token bound to one position of a signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureSlot {
    pub signature_id: u32,
    pub position: usize,
    pub min_len: u32,
    pub max_len: u32,
    pub direction: Direction,
}

/// Meaning of a frame token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameTokenKind {
    Signature {
        signature_id: u32,
        position: usize,
        min_len: u32,
        max_len: u32,
        direction: Direction,
    },
    Orphan {
        frame_length: u32,
        direction: Direction,
    },
    Unk,
}

impl FrameTokenKind {
    pub fn direction(&self) -> Option<Direction> {
        match self {
            FrameTokenKind::Signature { direction, .. } | FrameTokenKind::Orphan { direction, .. } => {
                Some(*direction)
            }
            FrameTokenKind::Unk => None,
        }
    }
}

/// Frame-token table.
///
/// Ids `0..slots.len()` are signature positions in rank order, the next
/// `orphans.len()` ids are sorted `(length, direction)` orphan pairs, and the
/// final id is UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameVocab {
    pub slots: Vec<SignatureSlot>,
    pub orphans: Vec<(u32, Direction)>,
}

impl FrameVocab {
    pub fn len(&self) -> usize {
        self.slots.len() + self.orphans.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn unk(&self) -> usize {
        self.slots.len() + self.orphans.len()
    }

    pub fn slot_token(&self, signature_id: u32, position: usize) -> Option<usize> {
        self.slots
            .iter()
            .position(|s| s.signature_id == signature_id && s.position == position)
    }

    pub fn orphan_token(&self, frame_length: u32, direction: Direction) -> Option<usize> {
        self.orphans
            .binary_search(&(frame_length, direction))
            .ok()
            .map(|i| i + self.slots.len())
    }

    pub fn token_for(&self, slot: Slot, frame_length: u32, direction: Direction) -> usize {
        let found = match slot {
            Slot::Signature {
                signature_id,
                position,
            } => self.slot_token(signature_id, position),
            Slot::Orphan => self.orphan_token(frame_length, direction),
        };
        found.unwrap_or(self.unk())
    }

    /// Inverse lookup. Ids past UNK also report `Unk`.
    pub fn describe(&self, token: usize) -> FrameTokenKind {
        if let Some(s) = self.slots.get(token) {
            return FrameTokenKind::Signature {
                signature_id: s.signature_id,
                position: s.position,
                min_len: s.min_len,
                max_len: s.max_len,
                direction: s.direction,
            };
        }
        match self.orphans.get(token - self.slots.len().min(token)) {
            Some(&(frame_length, direction)) if token >= self.slots.len() => {
                FrameTokenKind::Orphan {
                    frame_length,
                    direction,
                }
            }
            _ => FrameTokenKind::Unk,
        }
    }
}

/// Build the token table from the training assignments.
///
/// Only signatures that claimed at least one occurrence get tokens.
pub fn build_frame_vocab(
    ranked: &[Signature],
    assignments: &[SignatureAssignment],
    windows: &[TrafficWindow],
) -> FrameVocab {
    let mut used: BTreeSet<u32> = BTreeSet::new();
    let mut orphans: BTreeSet<(u32, Direction)> = BTreeSet::new();
    for (assignment, window) in assignments.iter().zip(windows) {
        for (slot, packet) in assignment.slots.iter().zip(&window.packets) {
            match slot {
                Slot::Signature { signature_id, .. } => {
                    used.insert(*signature_id);
                }
                Slot::Orphan => {
                    orphans.insert((packet.frame_length, packet.direction));
                }
            }
        }
    }
    let slots = ranked
        .iter()
        .filter(|s| used.contains(&s.signature_id))
        .flat_map(|s| {
            s.ranges.iter().enumerate().map(move |(position, r)| SignatureSlot {
                signature_id: s.signature_id,
                position,
                min_len: r.min_len,
                max_len: r.max_len,
                direction: r.direction,
            })
        })
        .collect();
    FrameVocab {
        slots,
        orphans: orphans.into_iter().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedPacket {
    pub frame_token: usize,
    pub duration_token: usize,
    pub direction: Direction,
    pub protocol_flags: ProtocolFlags,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedWindow {
    pub device_id: String,
    pub packets: Vec<TokenizedPacket>,
}

pub fn tokenize_window(
    window: &TrafficWindow,
    assignment: &SignatureAssignment,
    vocab: &FrameVocab,
    durations: &DurationModel,
) -> TokenizedWindow {
    let packets = window
        .packets
        .iter()
        .zip(&assignment.slots)
        .map(|(p, &slot)| TokenizedPacket {
            frame_token: vocab.token_for(slot, p.frame_length, p.direction),
            duration_token: durations.duration_to_token(p.duration),
            direction: p.direction,
            protocol_flags: p.protocol_flags,
            src_port: p.src_port,
            dst_port: p.dst_port,
        })
        .collect();
    TokenizedWindow {
        device_id: window.device_id.clone(),
        packets,
    }
}

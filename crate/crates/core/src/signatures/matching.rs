use serde::{Deserialize, Serialize};

use super::Signature;
use crate::ingest::{Direction, TrafficWindow};

/// What a single packet of a window was matched to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Signature { signature_id: u32, position: usize },
    Orphan,
}

/// Per-packet slots of one window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureAssignment {
    pub slots: Vec<Slot>,
}

impl SignatureAssignment {
    pub fn orphan_count(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, Slot::Orphan)).count()
    }

    /// `(signature_id, start)` of every claimed occurrence, left to right.
    pub fn occurrences(&self) -> Vec<(u32, usize)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Slot::Signature {
                    signature_id,
                    position: 0,
                } => Some((*signature_id, i)),
                _ => None,
            })
            .collect()
    }
}

/// Non-overlapping left-to-right occurrences of one signature.
pub fn count_occurrences(sig: &Signature, packets: &[(u32, Direction)]) -> usize {
    let len = sig.len();
    let mut count = 0;
    let mut i = 0;
    while i + len <= packets.len() {
        if sig.matches(&packets[i..i + len]) {
            count += 1;
            i += len;
        } else {
            i += 1;
        }
    }
    count
}

/// Fill `support_count` with the number of occurrences over `windows`.
pub fn count_support(sigs: &mut [Signature], windows: &[TrafficWindow]) {
    let flows: Vec<Vec<(u32, Direction)>> =
        windows.iter().map(TrafficWindow::lengths_and_directions).collect();
    for sig in sigs.iter_mut() {
        sig.support_count = flows.iter().map(|f| count_occurrences(sig, f)).sum();
    }
}

/// Order by `support_count * length` descending, then longer first, then by ranges.
pub fn rank_signatures(mut sigs: Vec<Signature>) -> Vec<Signature> {
    sigs.sort_by(|a, b| {
        let ka = a.support_count * a.len();
        let kb = b.support_count * b.len();
        kb.cmp(&ka)
            .then_with(|| b.len().cmp(&a.len()))
            .then_with(|| a.ranges.cmp(&b.ranges))
            .then_with(|| a.signature_id.cmp(&b.signature_id))
    });
    sigs
}

/// Greedy assignment: signatures in rank order each claim every free,
/// non-overlapping occurrence scanning left to right.
pub fn match_flow(packets: &[(u32, Direction)], ranked: &[Signature]) -> SignatureAssignment {
    let n = packets.len();
    let mut slots = vec![Slot::Orphan; n];
    let mut claimed = vec![false; n];
    for sig in ranked {
        let len = sig.len();
        let mut i = 0;
        while i + len <= n {
            let fits = !claimed[i..i + len].iter().any(|&c| c) && sig.matches(&packets[i..i + len]);
            if fits {
                for pos in 0..len {
                    claimed[i + pos] = true;
                    slots[i + pos] = Slot::Signature {
                        signature_id: sig.signature_id,
                        position: pos,
                    };
                }
                i += len;
            } else {
                i += 1;
            }
        }
    }
    SignatureAssignment { slots }
}

pub fn match_window(window: &TrafficWindow, ranked: &[Signature]) -> SignatureAssignment {
    match_flow(&window.lengths_and_directions(), ranked)
}

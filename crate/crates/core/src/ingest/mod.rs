//! Capture ingestion: parse captures, assign directions, cut traffic windows.

mod capture;
pub mod dissect;
mod protocol;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use tracing::warn;

pub use capture::parse_capture;
pub use protocol::{Protocol, ProtocolFlags};

use crate::error::{Error, Result};

/// One captured frame as read from a capture file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawPacket {
    pub timestamp: f64,
    pub frame_length: u32,
    pub src_address: Option<String>,
    pub dst_address: Option<String>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub protocol_flags: ProtocolFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    Incoming,
    Outgoing,
}

impl Direction {
    pub fn as_index(self) -> usize {
        match self {
            Direction::Incoming => 0,
            Direction::Outgoing => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Direction::Incoming
        } else {
            Direction::Outgoing
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Direction::Incoming => Direction::Outgoing,
            Direction::Outgoing => Direction::Incoming,
        }
    }
}

/// Direction-annotated packet metadata. Addresses are gone at this point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub frame_length: u32,
    pub direction: Direction,
    /// Seconds until the next packet of the same capture; 0 for the last one.
    pub duration: f64,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub protocol_flags: ProtocolFlags,
    pub capture_id: String,
    pub device_id: String,
}

/// `L` consecutive records from a single capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficWindow {
    pub device_id: String,
    pub capture_id: String,
    pub start_offset: usize,
    pub packets: Vec<PacketRecord>,
}

impl TrafficWindow {
    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn lengths_and_directions(&self) -> Vec<(u32, Direction)> {
        self.packets.iter().map(|p| (p.frame_length, p.direction)).collect()
    }
}

/// Entry of the window manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRef {
    pub capture_id: String,
    pub start_offset: usize,
}

impl From<&TrafficWindow> for WindowRef {
    fn from(w: &TrafficWindow) -> Self {
        WindowRef {
            capture_id: w.capture_id.clone(),
            start_offset: w.start_offset,
        }
    }
}

/// The address seen most often across source and destination fields.
///
/// Ties go to the lexicographically smallest address.
pub fn infer_device_address(raws: &[RawPacket]) -> Result<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for raw in raws {
        for addr in [&raw.src_address, &raw.dst_address].into_iter().flatten() {
            *counts.entry(addr.as_str()).or_default() += 1;
        }
    }
    // BTreeMap iterates in ascending key order, so the first maximum wins ties.
    let mut best: Option<(&str, usize)> = None;
    for (addr, count) in counts {
        if best.map_or(true, |(_, c)| count > c) {
            best = Some((addr, count));
        }
    }
    best.map(|(a, _)| a.to_string()).ok_or(Error::EmptyCapture)
}

/// Sort by timestamp, assign directions, convert timestamps to durations, drop addresses.
pub fn normalize(
    raws: &[RawPacket],
    device_address: &str,
    capture_id: &str,
    device_id: &str,
) -> Vec<PacketRecord> {
    let mut sorted: Vec<&RawPacket> = raws.iter().collect();
    sorted.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut records = Vec::with_capacity(sorted.len());
    for (i, raw) in sorted.iter().enumerate() {
        let duration = match sorted.get(i + 1) {
            Some(next) => (next.timestamp - raw.timestamp).max(0.0),
            None => 0.0,
        };
        let direction = if raw.src_address.as_deref() == Some(device_address) {
            Direction::Outgoing
        } else {
            Direction::Incoming
        };
        let transport = raw.protocol_flags.has_transport();
        records.push(PacketRecord {
            frame_length: raw.frame_length.max(1),
            direction,
            duration,
            src_port: raw.src_port.filter(|_| transport),
            dst_port: raw.dst_port.filter(|_| transport),
            protocol_flags: raw.protocol_flags,
            capture_id: capture_id.to_string(),
            device_id: device_id.to_string(),
        });
    }
    records
}

/// Sample `n` windows of `window_len` consecutive records without replacement
/// over every valid (capture, offset) pair.
///
/// Returned windows are ordered by capture then offset.
pub fn make_windows(
    captures: &[Vec<PacketRecord>],
    window_len: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<TrafficWindow>> {
    if window_len < 2 {
        return Err(Error::Config(format!("window length must be >= 2, got {window_len}")));
    }
    if n == 0 {
        return Err(Error::Config("window count must be >= 1".into()));
    }
    let mut slots: Vec<(usize, usize)> = Vec::new();
    for (ci, capture) in captures.iter().enumerate() {
        if capture.len() >= window_len {
            slots.extend((0..=capture.len() - window_len).map(|off| (ci, off)));
        }
    }
    if slots.len() < n {
        warn!(available = slots.len(), requested = n, "fewer windows available than requested");
    }
    let take = n.min(slots.len());
    let mut rng = crate::seed::rng(seed);
    let mut chosen: Vec<(usize, usize)> = index::sample(&mut rng, slots.len(), take)
        .into_iter()
        .map(|i| slots[i])
        .collect();
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|(ci, off)| {
            let packets = captures[ci][off..off + window_len].to_vec();
            TrafficWindow {
                device_id: packets[0].device_id.clone(),
                capture_id: packets[0].capture_id.clone(),
                start_offset: off,
                packets,
            }
        })
        .collect())
}

/// Capture files of one device directory (`.pcap`, `.pcapng`, `.cap`), sorted by name.
pub fn device_captures(device_dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(device_dir)
        .map_err(|e| Error::io(format!("listing {}", device_dir.display()), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && matches!(ext, "pcap" | "pcapng" | "cap") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Parse and normalize every capture of a device. Captures without addressed
/// packets are skipped with a warning.
pub fn ingest_device(device_dir: &Path, device_id: &str) -> Result<Vec<Vec<PacketRecord>>> {
    let mut captures = Vec::new();
    for path in device_captures(device_dir)? {
        let raws = parse_capture(&path)?;
        let capture_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("capture")
            .to_string();
        match infer_device_address(&raws) {
            Ok(addr) => captures.push(normalize(&raws, &addr, &capture_id, device_id)),
            Err(Error::EmptyCapture) => {
                warn!(path = %path.display(), "no addressed packets; capture skipped")
            }
            Err(e) => return Err(e),
        }
    }
    Ok(captures)
}

#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use iotflow_core::ingest::{Direction, PacketRecord, Protocol, ProtocolFlags, TrafficWindow};

/// Minimal microsecond libpcap writer, independent of the library's own.
pub fn write_pcap(path: &Path, frames: &[(f64, Vec<u8>)]) {
    let mut out = Vec::new();
    out.extend_from_slice(&0xa1b2_c3d4u32.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&[0; 8]);
    out.extend_from_slice(&65535u32.to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());
    for (ts, data) in frames {
        let us = (ts * 1e6).round() as u64;
        out.extend_from_slice(&((us / 1_000_000) as u32).to_le_bytes());
        out.extend_from_slice(&((us % 1_000_000) as u32).to_le_bytes());
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
    }
    std::fs::File::create(path).unwrap().write_all(&out).unwrap();
}

pub fn tcp_flags() -> ProtocolFlags {
    ProtocolFlags::of(&[Protocol::Ip, Protocol::Tcp])
}

pub fn record(frame_length: u32, direction: Direction, duration: f64) -> PacketRecord {
    PacketRecord {
        frame_length,
        direction,
        duration,
        src_port: Some(40000),
        dst_port: Some(443),
        protocol_flags: tcp_flags(),
        capture_id: "c0".into(),
        device_id: "dev".into(),
    }
}

pub fn window(packets: &[(u32, Direction)]) -> TrafficWindow {
    TrafficWindow {
        device_id: "dev".into(),
        capture_id: "c0".into(),
        start_offset: 0,
        packets: packets.iter().map(|&(l, d)| record(l, d, 0.01)).collect(),
    }
}

pub mod oracle {
    use std::collections::BTreeSet;

    use iotflow_core::ingest::Direction;
    use iotflow_core::signatures::{Signature, SignatureAssignment, SignatureRange, Slot};
    use rand::Rng;

    /// Textbook DBSCAN over every subarray (duplicates kept) of every flow,
    /// with pairwise distances and opposing directions never adjacent.
    /// Points are visited in (directions, lengths) order.
    pub fn dbscan_signatures(
        flows: &[Vec<(u32, Direction)>],
        sizes: std::ops::RangeInclusive<usize>,
        eps: f64,
        min_samples: usize,
    ) -> BTreeSet<Vec<SignatureRange>> {
        let mut out = BTreeSet::new();
        for size in sizes {
            let mut pts: Vec<(Vec<Direction>, Vec<u32>)> = flows
                .iter()
                .flat_map(|f| f.windows(size))
                .map(|s| (s.iter().map(|p| p.1).collect(), s.iter().map(|p| p.0).collect()))
                .collect();
            pts.sort();
            let n = pts.len();
            let near = |i: usize, j: usize| {
                pts[i].0 == pts[j].0
                    && pts[i]
                        .1
                        .iter()
                        .zip(&pts[j].1)
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                        <= eps
            };
            let neighbors: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).collect()).collect();
            let core: Vec<bool> = neighbors.iter().map(|v| v.len() >= min_samples).collect();
            let mut label: Vec<Option<usize>> = vec![None; n];
            let mut clusters = 0;
            for i in 0..n {
                if label[i].is_some() || !core[i] {
                    continue;
                }
                label[i] = Some(clusters);
                let mut stack = vec![i];
                while let Some(p) = stack.pop() {
                    if !core[p] {
                        continue;
                    }
                    for &q in &neighbors[p] {
                        if label[q].is_none() {
                            label[q] = Some(clusters);
                            stack.push(q);
                        }
                    }
                }
                clusters += 1;
            }
            for c in 0..clusters {
                let members: Vec<usize> = (0..n).filter(|&i| label[i] == Some(c)).collect();
                let ranges = (0..size)
                    .map(|pos| SignatureRange {
                        min_len: members.iter().map(|&m| pts[m].1[pos]).min().unwrap(),
                        max_len: members.iter().map(|&m| pts[m].1[pos]).max().unwrap(),
                        direction: pts[members[0]].0[pos],
                    })
                    .collect();
                out.insert(ranges);
            }
        }
        out
    }

    /// Every non-overlapping placement of signature occurrences on `packets`,
    /// as sets of `(signature index, start)`.
    pub fn all_assignments(packets: &[(u32, Direction)], sigs: &[Signature]) -> Vec<Vec<(usize, usize)>> {
        fn go(
            i: usize,
            packets: &[(u32, Direction)],
            sigs: &[Signature],
            cur: &mut Vec<(usize, usize)>,
            out: &mut Vec<Vec<(usize, usize)>>,
        ) {
            if i >= packets.len() {
                out.push(cur.clone());
                return;
            }
            go(i + 1, packets, sigs, cur, out);
            for (s, sig) in sigs.iter().enumerate() {
                let end = i + sig.len();
                if end <= packets.len() && sig.matches(&packets[i..end]) {
                    cur.push((s, i));
                    go(end, packets, sigs, cur, out);
                    cur.pop();
                }
            }
        }
        let mut out = Vec::new();
        go(0, packets, sigs, &mut Vec::new(), &mut out);
        out
    }

    fn covered(placement: &[(usize, usize)], sigs: &[Signature], n: usize) -> Vec<bool> {
        let mut c = vec![false; n];
        for &(s, start) in placement {
            c[start..start + sigs[s].len()].iter_mut().for_each(|x| *x = true);
        }
        c
    }

    /// No occurrence of any signature fits entirely in uncovered packets.
    pub fn is_maximal(placement: &[(usize, usize)], packets: &[(u32, Direction)], sigs: &[Signature]) -> bool {
        let c = covered(placement, sigs, packets.len());
        sigs.iter().all(|sig| {
            (0..packets.len()).all(|i| {
                let end = i + sig.len();
                end > packets.len() || c[i..end].iter().any(|&x| x) || !sig.matches(&packets[i..end])
            })
        })
    }

    /// Placement described by an assignment, or `None` if its slots are not
    /// whole, in-order signature occurrences.
    pub fn placement_of(assignment: &SignatureAssignment, sigs: &[Signature]) -> Option<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < assignment.slots.len() {
            match assignment.slots[i] {
                Slot::Orphan => i += 1,
                Slot::Signature { signature_id, position: 0 } => {
                    let s = sigs.iter().position(|s| s.signature_id == signature_id)?;
                    for pos in 0..sigs[s].len() {
                        let expect = Slot::Signature { signature_id, position: pos };
                        if assignment.slots.get(i + pos) != Some(&expect) {
                            return None;
                        }
                    }
                    out.push((s, i));
                    i += sigs[s].len();
                }
                Slot::Signature { .. } => return None,
            }
        }
        Some(out)
    }

    /// Greedy output is one of the exhaustively enumerated maximal placements.
    pub fn greedy_is_maximal(packets: &[(u32, Direction)], sigs: &[Signature], assignment: &SignatureAssignment) -> bool {
        let Some(mut greedy) = placement_of(assignment, sigs) else { return false };
        greedy.sort();
        all_assignments(packets, sigs).into_iter().any(|mut p| {
            p.sort();
            p == greedy && is_maximal(&p, packets, sigs)
        })
    }

    const ALPHABET: [u32; 6] = [60, 61, 62, 100, 101, 140];

    /// Up to three short signatures over a tiny alphabet and a window of at
    /// most 8 packets that plants some of their occurrences.
    pub fn random_case<R: Rng>(rng: &mut R) -> (Vec<Signature>, Vec<(u32, Direction)>) {
        let dir = |rng: &mut R| if rng.random_bool(0.5) { Direction::Outgoing } else { Direction::Incoming };
        let n_sigs = rng.random_range(1..=3);
        let sigs: Vec<Signature> = (0..n_sigs)
            .map(|id| Signature {
                signature_id: id as u32,
                ranges: (0..rng.random_range(1..=3))
                    .map(|_| {
                        let lo = ALPHABET[rng.random_range(0..ALPHABET.len())];
                        SignatureRange { min_len: lo, max_len: lo + rng.random_range(0..=2), direction: dir(rng) }
                    })
                    .collect(),
                support_count: rng.random_range(0..10),
            })
            .collect();
        let l = rng.random_range(1..=8);
        let mut packets = Vec::with_capacity(l);
        while packets.len() < l {
            if rng.random_bool(0.6) {
                let sig = &sigs[rng.random_range(0..sigs.len())];
                for r in &sig.ranges {
                    packets.push((rng.random_range(r.min_len..=r.max_len), r.direction));
                }
            } else {
                packets.push((ALPHABET[rng.random_range(0..ALPHABET.len())], dir(rng)));
            }
        }
        packets.truncate(l);
        (sigs, packets)
    }
}

pub mod tokens {
    use iotflow_core::ingest::{Direction, Protocol, ProtocolFlags};
    use iotflow_core::signatures::{TokenizedPacket, TokenizedWindow};

    pub const FRAMES: usize = 12;
    pub const DURATIONS: usize = 4;

    pub fn packet(frame: usize, duration: usize, out: bool, port: Option<u16>) -> TokenizedPacket {
        let flags = if port.is_some() {
            ProtocolFlags::of(&[Protocol::Ip, Protocol::Tcp, Protocol::Https])
        } else {
            ProtocolFlags::of(&[Protocol::Arp])
        };
        TokenizedPacket {
            frame_token: frame,
            duration_token: duration,
            direction: if out { Direction::Outgoing } else { Direction::Incoming },
            protocol_flags: flags,
            src_port: port.map(|_| 50123),
            dst_port: port,
        }
    }

    /// Deterministic window of `len` packets parameterized by `mode`.
    pub fn mode_window(mode: usize, len: usize) -> TokenizedWindow {
        let packets = (0..len)
            .map(|i| match mode {
                0 => packet(i % 4, i % 2, i % 2 == 0, Some(443)),
                _ => packet(4 + (i % 6), 2 + (i % 3 == 0) as usize, i % 3 != 0, (i % 5 != 4).then_some(8883)),
            })
            .collect();
        TokenizedWindow { device_id: "dev".into(), packets }
    }
}

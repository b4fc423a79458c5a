use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{Protocol, ProtocolFlags};
use crate::signatures::{TokenizedPacket, TokenizedWindow};

pub const PORT_NONE: usize = 0;
pub const PORT_UNK: usize = 1;
const EPHEMERAL: std::ops::RangeInclusive<u16> = 49152..=65535;

/// Per-device port ids: 0 for no port, 1 for UNK, then frequent ports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortVocab {
    pub ports: Vec<u16>,
    /// Ports seen in training but left out of the table; UNK decodes to one of these.
    pub rare: Vec<u16>,
}

impl PortVocab {
    /// Keep ports seen at least `min_count` times, most frequent first, at
    /// most `max_size` of them.
    pub fn fit(windows: &[TokenizedWindow], max_size: usize, min_count: usize) -> Self {
        let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
        for p in windows.iter().flat_map(|w| &w.packets) {
            for port in [p.src_port, p.dst_port].into_iter().flatten() {
                *counts.entry(port).or_default() += 1;
            }
        }
        let mut ranked: Vec<(u16, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut ports = Vec::new();
        let mut rare = Vec::new();
        for (port, count) in ranked {
            if count >= min_count && ports.len() < max_size {
                ports.push(port);
            } else {
                rare.push(port);
            }
        }
        rare.sort_unstable();
        PortVocab { ports, rare }
    }

    pub fn len(&self) -> usize {
        self.ports.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, port: Option<u16>) -> usize {
        match port {
            None => PORT_NONE,
            Some(p) => self.ports.iter().position(|&q| q == p).map_or(PORT_UNK, |i| i + 2),
        }
    }

    /// Concrete port for an id. UNK draws from the rare pool, or from the
    /// ephemeral range when the pool is empty.
    pub fn port<R: Rng + ?Sized>(&self, id: usize, rng: &mut R) -> Option<u16> {
        match id {
            PORT_NONE => None,
            PORT_UNK => Some(if self.rare.is_empty() {
                rng.random_range(EPHEMERAL)
            } else {
                self.rare[rng.random_range(0..self.rare.len())]
            }),
            i => self.ports.get(i - 2).copied().or_else(|| Some(rng.random_range(EPHEMERAL))),
        }
    }
}

/// Categorical sizes every model head is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arities {
    pub frame: usize,
    pub duration: usize,
    pub port: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub frame: u32,
    pub duration: u32,
    /// 0 incoming, 1 outgoing.
    pub direction: u32,
    pub flags: [u8; Protocol::COUNT],
    pub src_port: u32,
    pub dst_port: u32,
}

/// Frame tokens outside the vocabulary become the final (UNK) id.
pub fn featurize(packet: &TokenizedPacket, arities: &Arities, ports: &PortVocab) -> FeatureVector {
    let frame = if packet.frame_token < arities.frame {
        packet.frame_token
    } else {
        arities.frame - 1
    };
    FeatureVector {
        frame: frame as u32,
        duration: packet.duration_token as u32,
        direction: packet.direction.as_index() as u32,
        flags: packet.protocol_flags.to_array(),
        src_port: ports.id(packet.src_port) as u32,
        dst_port: ports.id(packet.dst_port) as u32,
    }
}

impl FeatureVector {
    pub fn protocol_flags(&self) -> ProtocolFlags {
        ProtocolFlags::from_array(&self.flags).unwrap_or_else(ProtocolFlags::empty)
    }

    pub fn within(&self, arities: &Arities) -> bool {
        (self.frame as usize) < arities.frame
            && (self.duration as usize) < arities.duration
            && self.direction < 2
            && (self.src_port as usize) < arities.port
            && (self.dst_port as usize) < arities.port
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Direction;

    fn packet(src: Option<u16>, dst: Option<u16>) -> TokenizedPacket {
        TokenizedPacket {
            frame_token: 0,
            duration_token: 0,
            direction: Direction::Outgoing,
            protocol_flags: ProtocolFlags::of(&[Protocol::Ip, Protocol::Tcp]),
            src_port: src,
            dst_port: dst,
        }
    }

    #[test]
    fn port_ids() {
        let w = TokenizedWindow {
            device_id: "d".into(),
            packets: vec![
                packet(Some(50000), Some(443)),
                packet(Some(443), Some(50000)),
                packet(Some(51000), Some(443)),
                packet(None, None),
            ],
        };
        let v = PortVocab::fit(&[w], 8, 2);
        assert_eq!(v.ports, vec![443, 50000]);
        assert_eq!(v.rare, vec![51000]);
        assert_eq!(v.id(Some(443)), 2);
        assert_eq!(v.id(Some(1)), PORT_UNK);
        assert_eq!(v.id(None), PORT_NONE);
        let mut rng = crate::seed::rng(0);
        assert_eq!(v.port(PORT_UNK, &mut rng), Some(51000));
        assert_eq!(v.port(PORT_NONE, &mut rng), None);
        assert_eq!(v.port(3, &mut rng), Some(50000));
    }

    #[test]
    fn featurize_fields() {
        let ports = PortVocab { ports: vec![443], rare: vec![] };
        let arities = Arities { frame: 3, duration: 2, port: ports.len() };
        let mut p = packet(Some(60000), Some(443));
        let f = featurize(&p, &arities, &ports);
        assert_eq!(f.direction, 1);
        assert_eq!(f.protocol_flags(), p.protocol_flags);
        assert_eq!((f.src_port, f.dst_port), (PORT_UNK as u32, 2));
        p.direction = Direction::Incoming;
        p.frame_token = 99;
        let f = featurize(&p, &arities, &ports);
        assert_eq!(f.direction, 0);
        assert_eq!(f.frame, 2);
    }
}

//! Wire-format materialization of synthetic windows.
//!
//! Each record gets an Ethernet frame whose header stack follows its protocol
//! flags; unmodeled header fields and the payload are random. Frames are
//! written as microsecond libpcap, one file per device.

use std::io::Write;
use std::net::{Ipv4Addr, Ipv6Addr};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::ingest::dissect::{tcp_application, udp_application};
use crate::ingest::{Direction, Protocol, ProtocolFlags};
use crate::reconstruct::SyntheticWindow;

const ETH: u32 = 14;
const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_ARP: u16 = 0x0806;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const ETHERTYPE_EAPOL: u16 = 0x888E;
/// IEEE local experimental ethertype, carries nothing the dissector tags.
const ETHERTYPE_GENERIC: u16 = 0x88B5;
/// IANA "use for experimentation" protocol number.
const IP_PROTO_EXPERIMENTAL: u8 = 253;
const LINKTYPE_ETHERNET: u32 = 1;
const EPHEMERAL: std::ops::RangeInclusive<u16> = 49152..=65535;

/// Header stack a record is emitted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stack {
    Tcp,
    Udp,
    Icmp,
    Icmpv6,
    IpOnly,
    Arp,
    Eapol,
    Llc,
    Generic,
}

impl Stack {
    pub fn for_flags(flags: ProtocolFlags) -> Stack {
        use Protocol::*;
        let order = [
            (Tcp, Stack::Tcp),
            (Udp, Stack::Udp),
            (Icmpv6, Stack::Icmpv6),
            (Icmp, Stack::Icmp),
            (Ip, Stack::IpOnly),
            (Arp, Stack::Arp),
            (Eapol, Stack::Eapol),
            (Llc, Stack::Llc),
        ];
        order
            .iter()
            .find(|(p, _)| flags.contains(*p))
            .map_or(Stack::Generic, |(_, s)| *s)
    }

    /// Bytes of headers before the payload.
    pub fn min_frame_len(self) -> u32 {
        match self {
            Stack::Tcp => ETH + 20 + 20,
            Stack::Udp | Stack::Icmp => ETH + 20 + 8,
            Stack::Icmpv6 => ETH + 40 + 8,
            Stack::IpOnly => ETH + 20,
            Stack::Arp => ETH + 28,
            Stack::Eapol => ETH + 4,
            Stack::Llc => ETH + 3,
            Stack::Generic => ETH,
        }
    }

    pub fn has_ports(self) -> bool {
        matches!(self, Stack::Tcp | Stack::Udp)
    }

    /// Whether the dissector recovers IPv4 endpoints from this stack. Only
    /// those are compared with the (IPv4) device address, so every other
    /// stack parses back as incoming.
    pub fn has_addresses(self) -> bool {
        !matches!(self, Stack::Icmpv6 | Stack::Eapol | Stack::Llc | Stack::Generic)
    }

    /// Flags the dissector reports for a frame of this stack.
    pub fn wire_flags(self, src_port: Option<u16>, dst_port: Option<u16>, frame_len: u32) -> ProtocolFlags {
        let mut f = ProtocolFlags::empty();
        let (sp, dp) = (src_port.unwrap_or(0), dst_port.unwrap_or(0));
        let payload = frame_len.saturating_sub(self.min_frame_len()) as usize;
        match self {
            Stack::Tcp => {
                f = ProtocolFlags::of(&[Protocol::Ip, Protocol::Tcp]);
                tcp_application(sp, dp, payload, &mut f);
            }
            Stack::Udp => {
                f = ProtocolFlags::of(&[Protocol::Ip, Protocol::Udp]);
                udp_application(sp, dp, &mut f);
            }
            Stack::Icmp => f = ProtocolFlags::of(&[Protocol::Ip, Protocol::Icmp]),
            Stack::Icmpv6 => f = ProtocolFlags::of(&[Protocol::Ip, Protocol::Icmpv6]),
            Stack::IpOnly => f.set(Protocol::Ip),
            Stack::Arp => f.set(Protocol::Arp),
            Stack::Eapol => f.set(Protocol::Eapol),
            Stack::Llc => f.set(Protocol::Llc),
            Stack::Generic => {}
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Addressing {
    pub device: Ipv4Addr,
    /// First three octets of the peer /24.
    pub peer_network: Ipv4Addr,
    pub peer_count: u8,
    pub device_v6: Ipv6Addr,
    pub peer_v6_network: Ipv6Addr,
}

impl Default for Addressing {
    fn default() -> Self {
        Addressing {
            device: Ipv4Addr::new(10, 0, 0, 2),
            peer_network: Ipv4Addr::new(10, 0, 1, 0),
            peer_count: 254,
            device_v6: "fd00::2".parse().expect("literal"),
            peer_v6_network: "fd00::1:0".parse().expect("literal"),
        }
    }
}

impl Addressing {
    fn peer<R: Rng + ?Sized>(&self, rng: &mut R) -> (Ipv4Addr, Ipv6Addr) {
        let host = rng.random_range(1..=self.peer_count.max(1));
        let o = self.peer_network.octets();
        let mut v6 = self.peer_v6_network.octets();
        v6[15] = host;
        (Ipv4Addr::new(o[0], o[1], o[2], host), Ipv6Addr::from(v6))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub mac: [u8; 6],
    pub v4: Ipv4Addr,
    pub v6: Ipv6Addr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketBlueprint {
    pub timestamp: f64,
    pub frame_length: u32,
    pub stack: Stack,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub ttl: u8,
    pub ip_id: u16,
    pub tcp_seq: u32,
    pub tcp_ack: u32,
    pub tcp_window: u16,
    pub payload: Vec<u8>,
}

fn device_mac() -> [u8; 6] {
    [0x02, 0x00, 0x00, 0x00, 0x00, 0x02]
}

fn peer_mac(v4: Ipv4Addr) -> [u8; 6] {
    let o = v4.octets();
    [0x02, 0x00, 0x00, o[1], o[2], o[3]]
}

/// Plan every packet of `window`, with timestamps shifted by `start`.
pub fn build_packets<R: Rng + ?Sized>(
    window: &SyntheticWindow,
    addressing: &Addressing,
    start: f64,
    rng: &mut R,
) -> Vec<PacketBlueprint> {
    let device = Endpoint {
        mac: device_mac(),
        v4: addressing.device,
        v6: addressing.device_v6,
    };
    window
        .packets
        .iter()
        .zip(&window.timestamps)
        .map(|(p, &ts)| {
            let stack = Stack::for_flags(p.protocol_flags);
            let min = stack.min_frame_len();
            let frame_length = if p.frame_length < min {
                warn!(length = p.frame_length, minimum = min, ?stack, "frame below header size, clamped");
                min
            } else {
                p.frame_length
            };
            let (v4, v6) = addressing.peer(rng);
            let peer = Endpoint { mac: peer_mac(v4), v4, v6 };
            let (src, dst) = match p.direction {
                Direction::Outgoing => (device.clone(), peer),
                Direction::Incoming => (peer, device.clone()),
            };
            let port = |port: Option<u16>, rng: &mut R| {
                stack
                    .has_ports()
                    .then(|| port.unwrap_or_else(|| rng.random_range(EPHEMERAL)))
            };
            let src_port = port(p.src_port, rng);
            let dst_port = port(p.dst_port, rng);
            let mut payload = vec![0u8; (frame_length - min) as usize];
            rng.fill_bytes(&mut payload);
            PacketBlueprint {
                timestamp: start + ts,
                frame_length,
                stack,
                src,
                dst,
                src_port,
                dst_port,
                ttl: rng.random_range(32..=255),
                ip_id: rng.random(),
                tcp_seq: rng.random(),
                tcp_ack: rng.random(),
                tcp_window: rng.random_range(1024..=65535),
                payload,
            }
        })
        .collect()
}

fn fold_checksum(mut sum: u32) -> u16 {
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn ones_sum(data: &[u8]) -> u32 {
    let mut sum = 0u32;
    for chunk in data.chunks(2) {
        let word = if chunk.len() == 2 {
            u16::from_be_bytes([chunk[0], chunk[1]])
        } else {
            u16::from_be_bytes([chunk[0], 0])
        };
        sum += word as u32;
    }
    sum
}

pub fn internet_checksum(data: &[u8]) -> u16 {
    fold_checksum(ones_sum(data))
}

fn ipv4_header(bp: &PacketBlueprint, proto: u8, payload_len: usize) -> Vec<u8> {
    let total = (20 + payload_len) as u16;
    let mut h = vec![0u8; 20];
    h[0] = 0x45;
    h[2..4].copy_from_slice(&total.to_be_bytes());
    h[4..6].copy_from_slice(&bp.ip_id.to_be_bytes());
    h[6] = 0x40;
    h[8] = bp.ttl;
    h[9] = proto;
    h[12..16].copy_from_slice(&bp.src.v4.octets());
    h[16..20].copy_from_slice(&bp.dst.v4.octets());
    let c = internet_checksum(&h);
    h[10..12].copy_from_slice(&c.to_be_bytes());
    h
}

fn v4_pseudo_sum(bp: &PacketBlueprint, proto: u8, len: usize) -> u32 {
    let mut p = Vec::with_capacity(12);
    p.extend_from_slice(&bp.src.v4.octets());
    p.extend_from_slice(&bp.dst.v4.octets());
    p.extend_from_slice(&[0, proto]);
    p.extend_from_slice(&(len as u16).to_be_bytes());
    ones_sum(&p)
}

/// Set the 16-bit checksum at `at` of `segment` given an extra pseudo-header sum.
fn seal(segment: &mut [u8], at: usize, pseudo: u32, zero_as_ffff: bool) {
    let mut c = fold_checksum(pseudo + ones_sum(segment));
    if zero_as_ffff && c == 0 {
        c = 0xffff;
    }
    segment[at..at + 2].copy_from_slice(&c.to_be_bytes());
}

/// Frame bytes for one blueprint; checksums and length fields are computed.
pub fn serialize(bp: &PacketBlueprint) -> Vec<u8> {
    let mut frame = Vec::with_capacity(bp.frame_length as usize);
    frame.extend_from_slice(&bp.dst.mac);
    frame.extend_from_slice(&bp.src.mac);
    let port = |p: Option<u16>| p.unwrap_or(0).to_be_bytes();
    match bp.stack {
        Stack::Tcp | Stack::Udp | Stack::Icmp | Stack::IpOnly => {
            frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
            let (proto, mut seg) = match bp.stack {
                Stack::Tcp => {
                    let mut t = vec![0u8; 20];
                    t[0..2].copy_from_slice(&port(bp.src_port));
                    t[2..4].copy_from_slice(&port(bp.dst_port));
                    t[4..8].copy_from_slice(&bp.tcp_seq.to_be_bytes());
                    t[8..12].copy_from_slice(&bp.tcp_ack.to_be_bytes());
                    t[12] = 5 << 4;
                    t[13] = if bp.payload.is_empty() { 0x10 } else { 0x18 };
                    t[14..16].copy_from_slice(&bp.tcp_window.to_be_bytes());
                    (6u8, t)
                }
                Stack::Udp => {
                    let mut u = vec![0u8; 8];
                    u[0..2].copy_from_slice(&port(bp.src_port));
                    u[2..4].copy_from_slice(&port(bp.dst_port));
                    u[4..6].copy_from_slice(&((8 + bp.payload.len()) as u16).to_be_bytes());
                    (17u8, u)
                }
                Stack::Icmp => {
                    let mut i = vec![0u8; 8];
                    i[0] = 8;
                    i[4..6].copy_from_slice(&bp.ip_id.to_be_bytes());
                    (1u8, i)
                }
                _ => (IP_PROTO_EXPERIMENTAL, Vec::new()),
            };
            seg.extend_from_slice(&bp.payload);
            let seg_len = seg.len();
            match bp.stack {
                Stack::Tcp => seal(&mut seg, 16, v4_pseudo_sum(bp, 6, seg_len), false),
                Stack::Udp => seal(&mut seg, 6, v4_pseudo_sum(bp, 17, seg_len), true),
                Stack::Icmp => seal(&mut seg, 2, 0, false),
                _ => {}
            }
            frame.extend(ipv4_header(bp, proto, seg.len()));
            frame.extend(seg);
        }
        Stack::Icmpv6 => {
            frame.extend_from_slice(&ETHERTYPE_IPV6.to_be_bytes());
            let mut seg = vec![0u8; 8];
            seg[0] = 128;
            seg.extend_from_slice(&bp.payload);
            let mut pseudo = Vec::with_capacity(40);
            pseudo.extend_from_slice(&bp.src.v6.octets());
            pseudo.extend_from_slice(&bp.dst.v6.octets());
            pseudo.extend_from_slice(&(seg.len() as u32).to_be_bytes());
            pseudo.extend_from_slice(&[0, 0, 0, 58]);
            seal(&mut seg, 2, ones_sum(&pseudo), false);
            let mut h = vec![0u8; 40];
            h[0] = 0x60;
            h[4..6].copy_from_slice(&(seg.len() as u16).to_be_bytes());
            h[6] = 58;
            h[7] = bp.ttl;
            h[8..24].copy_from_slice(&bp.src.v6.octets());
            h[24..40].copy_from_slice(&bp.dst.v6.octets());
            frame.extend(h);
            frame.extend(seg);
        }
        Stack::Arp => {
            frame.extend_from_slice(&ETHERTYPE_ARP.to_be_bytes());
            frame.extend_from_slice(&[0, 1, 0x08, 0x00, 6, 4, 0, 1]);
            frame.extend_from_slice(&bp.src.mac);
            frame.extend_from_slice(&bp.src.v4.octets());
            frame.extend_from_slice(&bp.dst.mac);
            frame.extend_from_slice(&bp.dst.v4.octets());
            frame.extend_from_slice(&bp.payload);
        }
        Stack::Eapol => {
            frame.extend_from_slice(&ETHERTYPE_EAPOL.to_be_bytes());
            frame.extend_from_slice(&[2, 0]);
            frame.extend_from_slice(&(bp.payload.len() as u16).to_be_bytes());
            frame.extend_from_slice(&bp.payload);
        }
        Stack::Llc => {
            let len = (3 + bp.payload.len()).min(1500) as u16;
            frame.extend_from_slice(&len.to_be_bytes());
            frame.extend_from_slice(&[0x42, 0x42, 0x03]);
            frame.extend_from_slice(&bp.payload);
        }
        Stack::Generic => {
            frame.extend_from_slice(&ETHERTYPE_GENERIC.to_be_bytes());
            frame.extend_from_slice(&bp.payload);
        }
    }
    debug_assert_eq!(frame.len(), bp.frame_length as usize);
    frame
}

/// Microsecond libpcap writer for Ethernet frames.
pub fn write_capture(blueprints: &[PacketBlueprint], path: &Path) -> Result<()> {
    if blueprints.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::Validation("blueprints must be timestamp-ordered".into()));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let io = |e| Error::io(path.display().to_string(), e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut out = std::io::BufWriter::new(file);
    let mut header = Vec::with_capacity(24);
    header.extend_from_slice(&0xa1b2_c3d4u32.to_le_bytes());
    header.extend_from_slice(&2u16.to_le_bytes());
    header.extend_from_slice(&4u16.to_le_bytes());
    header.extend_from_slice(&0i32.to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    header.extend_from_slice(&65535u32.to_le_bytes());
    header.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
    out.write_all(&header).map_err(io)?;
    for bp in blueprints {
        let data = serialize(bp);
        let micros = (bp.timestamp * 1e6).round() as u64;
        let mut rec = Vec::with_capacity(16 + data.len());
        rec.extend_from_slice(&((micros / 1_000_000) as u32).to_le_bytes());
        rec.extend_from_slice(&((micros % 1_000_000) as u32).to_le_bytes());
        rec.extend_from_slice(&(data.len() as u32).to_le_bytes());
        rec.extend_from_slice(&(data.len() as u32).to_le_bytes());
        rec.extend_from_slice(&data);
        out.write_all(&rec).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Gap inserted between consecutive windows in a device capture, seconds.
pub const WINDOW_GAP: f64 = 1.0;

/// Blueprints for windows laid end to end, each starting `WINDOW_GAP` after
/// the previous window's last packet.
pub fn build_device_capture<R: Rng + ?Sized>(
    windows: &[SyntheticWindow],
    addressing: &Addressing,
    rng: &mut R,
) -> Vec<PacketBlueprint> {
    let mut out = Vec::new();
    let mut start = 0.0;
    for w in windows {
        let bps = build_packets(w, addressing, start, rng);
        if let Some(last) = bps.last() {
            start = last.timestamp + WINDOW_GAP;
        }
        out.extend(bps);
    }
    out
}

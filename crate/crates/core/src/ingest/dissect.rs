//! Minimal header dissector for the metadata the flow models consume.
//!
//! Only header fields are read; payload bytes are never inspected beyond
//! their length.

use std::net::{Ipv4Addr, Ipv6Addr};

use super::protocol::{Protocol, ProtocolFlags};

/// Link-layer framing of captured bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    Ethernet,
    RawIp,
    Ipv4,
    Ipv6,
    LinuxSll,
    Null,
}

impl LinkKind {
    /// Map a libpcap `LINKTYPE_*` value.
    pub fn from_linktype(value: i32) -> Option<Self> {
        match value {
            0 => Some(LinkKind::Null),
            1 => Some(LinkKind::Ethernet),
            101 => Some(LinkKind::RawIp),
            113 => Some(LinkKind::LinuxSll),
            228 => Some(LinkKind::Ipv4),
            229 => Some(LinkKind::Ipv6),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dissection {
    pub flags: ProtocolFlags,
    pub src_address: Option<String>,
    pub dst_address: Option<String>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DissectError(pub String);

impl std::fmt::Display for DissectError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_ARP: u16 = 0x0806;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const ETHERTYPE_EAPOL: u16 = 0x888E;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88A8;

fn truncated(what: &str) -> DissectError {
    DissectError(format!("truncated {what} header"))
}

fn be16(data: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([data[at], data[at + 1]])
}

pub fn dissect(link: LinkKind, data: &[u8]) -> Result<Dissection, DissectError> {
    let mut out = Dissection::default();
    match link {
        LinkKind::Ethernet => ethernet(data, &mut out)?,
        LinkKind::RawIp => match data.first().map(|b| b >> 4) {
            Some(4) => ipv4(data, &mut out)?,
            Some(6) => ipv6(data, &mut out)?,
            _ => return Err(DissectError("raw frame is neither IPv4 nor IPv6".into())),
        },
        LinkKind::Ipv4 => ipv4(data, &mut out)?,
        LinkKind::Ipv6 => ipv6(data, &mut out)?,
        LinkKind::LinuxSll => {
            if data.len() < 16 {
                return Err(truncated("linux cooked"));
            }
            ethertype(be16(data, 14), &data[16..], &mut out)?;
        }
        LinkKind::Null => {
            if data.len() < 4 {
                return Err(truncated("loopback"));
            }
            let family = u32::from_ne_bytes([data[0], data[1], data[2], data[3]]);
            match family {
                2 => ipv4(&data[4..], &mut out)?,
                24 | 28 | 30 => ipv6(&data[4..], &mut out)?,
                _ => return Err(DissectError(format!("unknown loopback family {family}"))),
            }
        }
    }
    Ok(out)
}

fn ethernet(data: &[u8], out: &mut Dissection) -> Result<(), DissectError> {
    if data.len() < 14 {
        return Err(truncated("ethernet"));
    }
    let mut offset = 12;
    let mut kind = be16(data, offset);
    while kind == ETHERTYPE_VLAN || kind == ETHERTYPE_QINQ {
        offset += 4;
        if data.len() < offset + 2 {
            return Err(truncated("vlan"));
        }
        kind = be16(data, offset);
    }
    offset += 2;
    if kind <= 1500 {
        // 802.3 length field, payload starts with an LLC header
        out.flags.set(Protocol::Llc);
        return Ok(());
    }
    ethertype(kind, &data[offset..], out)
}

fn ethertype(kind: u16, payload: &[u8], out: &mut Dissection) -> Result<(), DissectError> {
    match kind {
        ETHERTYPE_IPV4 => ipv4(payload, out),
        ETHERTYPE_IPV6 => ipv6(payload, out),
        ETHERTYPE_ARP => arp(payload, out),
        ETHERTYPE_EAPOL => {
            out.flags.set(Protocol::Eapol);
            Ok(())
        }
        _ => Ok(()),
    }
}

fn arp(data: &[u8], out: &mut Dissection) -> Result<(), DissectError> {
    if data.len() < 8 {
        return Err(truncated("arp"));
    }
    out.flags.set(Protocol::Arp);
    let ptype = be16(data, 2);
    let hlen = data[4] as usize;
    let plen = data[5] as usize;
    if ptype == ETHERTYPE_IPV4 && plen == 4 {
        let need = 8 + 2 * hlen + 2 * plen;
        if data.len() < need {
            return Err(truncated("arp"));
        }
        let spa = 8 + hlen;
        let tpa = spa + plen + hlen;
        let sender = Ipv4Addr::new(data[spa], data[spa + 1], data[spa + 2], data[spa + 3]);
        let target = Ipv4Addr::new(data[tpa], data[tpa + 1], data[tpa + 2], data[tpa + 3]);
        out.src_address = Some(sender.to_string());
        out.dst_address = Some(target.to_string());
    }
    Ok(())
}

fn ipv4(data: &[u8], out: &mut Dissection) -> Result<(), DissectError> {
    if data.len() < 20 || data[0] >> 4 != 4 {
        return Err(truncated("ipv4"));
    }
    let header_len = ((data[0] & 0x0f) as usize) * 4;
    if header_len < 20 || data.len() < header_len {
        return Err(truncated("ipv4"));
    }
    out.flags.set(Protocol::Ip);
    out.src_address = Some(Ipv4Addr::new(data[12], data[13], data[14], data[15]).to_string());
    out.dst_address = Some(Ipv4Addr::new(data[16], data[17], data[18], data[19]).to_string());
    let fragment_offset = be16(data, 6) & 0x1fff;
    if fragment_offset != 0 {
        // only the first fragment carries the transport header
        return Ok(());
    }
    let total_len = (be16(data, 2) as usize).clamp(header_len, data.len());
    transport(data[9], &data[header_len..total_len], out)
}

fn ipv6(data: &[u8], out: &mut Dissection) -> Result<(), DissectError> {
    if data.len() < 40 || data[0] >> 4 != 6 {
        return Err(truncated("ipv6"));
    }
    out.flags.set(Protocol::Ip);
    let mut src = [0u8; 16];
    let mut dst = [0u8; 16];
    src.copy_from_slice(&data[8..24]);
    dst.copy_from_slice(&data[24..40]);
    out.src_address = Some(Ipv6Addr::from(src).to_string());
    out.dst_address = Some(Ipv6Addr::from(dst).to_string());

    let mut next = data[6];
    let mut offset = 40;
    loop {
        let ext_len = match next {
            0 | 43 | 60 => {
                if data.len() < offset + 2 {
                    return Err(truncated("ipv6 extension"));
                }
                (data[offset + 1] as usize + 1) * 8
            }
            44 => 8,
            51 => {
                if data.len() < offset + 2 {
                    return Err(truncated("ipv6 extension"));
                }
                (data[offset + 1] as usize + 2) * 4
            }
            _ => break,
        };
        if data.len() < offset + ext_len {
            return Err(truncated("ipv6 extension"));
        }
        next = data[offset];
        offset += ext_len;
    }
    transport(next, &data[offset..], out)
}

fn transport(proto: u8, data: &[u8], out: &mut Dissection) -> Result<(), DissectError> {
    match proto {
        1 => out.flags.set(Protocol::Icmp),
        58 => out.flags.set(Protocol::Icmpv6),
        6 => {
            if data.len() < 20 {
                return Err(truncated("tcp"));
            }
            out.flags.set(Protocol::Tcp);
            let (src, dst) = (be16(data, 0), be16(data, 2));
            out.src_port = Some(src);
            out.dst_port = Some(dst);
            let data_offset = ((data[12] >> 4) as usize) * 4;
            let payload_len = data.len().saturating_sub(data_offset);
            tcp_application(src, dst, payload_len, &mut out.flags);
        }
        17 => {
            if data.len() < 8 {
                return Err(truncated("udp"));
            }
            out.flags.set(Protocol::Udp);
            let (src, dst) = (be16(data, 0), be16(data, 2));
            out.src_port = Some(src);
            out.dst_port = Some(dst);
            udp_application(src, dst, &mut out.flags);
        }
        _ => {}
    }
    Ok(())
}

fn either(src: u16, dst: u16, ports: &[u16]) -> bool {
    ports.contains(&src) || ports.contains(&dst)
}

/// Port-based application tagging for TCP.
pub fn tcp_application(src: u16, dst: u16, payload_len: usize, flags: &mut ProtocolFlags) {
    if either(src, dst, &[443]) {
        flags.set(Protocol::Https);
    }
    if either(src, dst, &[80, 8080]) && payload_len > 0 {
        flags.set(Protocol::Http);
    }
    if either(src, dst, &[53]) {
        flags.set(Protocol::Dns);
    }
}

/// Port-based application tagging for UDP.
pub fn udp_application(src: u16, dst: u16, flags: &mut ProtocolFlags) {
    if either(src, dst, &[67, 68]) {
        flags.set(Protocol::Dhcp);
        flags.set(Protocol::Bootp);
    }
    if either(src, dst, &[1900]) {
        flags.set(Protocol::Ssdp);
    }
    if either(src, dst, &[53]) {
        flags.set(Protocol::Dns);
    }
    if either(src, dst, &[5353]) {
        flags.set(Protocol::Mdns);
    }
    if either(src, dst, &[123]) {
        flags.set(Protocol::Ntp);
    }
}

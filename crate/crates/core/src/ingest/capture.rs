//! libpcap / pcapng reading.

use std::fs::File;
use std::path::Path;

use pcap_parser::pcapng::Block;
use pcap_parser::{create_reader, Linktype, PcapBlockOwned, PcapError};
use tracing::warn;

use super::dissect::{dissect, LinkKind};
use super::RawPacket;
use crate::error::{Error, Result};

const READ_BUFFER: usize = 1 << 16;

struct Interface {
    link: Option<LinkKind>,
    linktype: Linktype,
    ts_offset: u64,
    resolution: u64,
}

fn parse_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::CaptureParse {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parse a capture file into one [`RawPacket`] per link-layer frame, in file order.
///
/// Frames the dissector cannot decode are kept with an empty flag vector.
pub fn parse_capture(path: &Path) -> Result<Vec<RawPacket>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    if file.metadata().map(|m| m.len()).unwrap_or(0) == 0 {
        warn!(path = %path.display(), "empty capture file");
        return Ok(Vec::new());
    }
    let mut reader = match create_reader(READ_BUFFER, file) {
        Ok(r) => r,
        Err(PcapError::HeaderNotRecognized) => {
            return Err(parse_error(path, "not a libpcap or pcapng file"))
        }
        Err(e) => return Err(parse_error(path, format!("{e:?}"))),
    };

    let mut packets = Vec::new();
    let mut legacy: Option<Interface> = None;
    let mut interfaces: Vec<Interface> = Vec::new();
    let mut frame_index = 0usize;

    let mut push = |packets: &mut Vec<RawPacket>,
                    iface: &Interface,
                    timestamp: f64,
                    origlen: u32,
                    data: &[u8]| {
        let frame_length = origlen.max(data.len() as u32).max(1);
        let mut raw = RawPacket {
            timestamp,
            frame_length,
            ..RawPacket::default()
        };
        match iface.link {
            Some(link) => match dissect(link, data) {
                Ok(d) => {
                    raw.protocol_flags = d.flags;
                    raw.src_address = d.src_address;
                    raw.dst_address = d.dst_address;
                    if d.flags.has_transport() {
                        raw.src_port = d.src_port;
                        raw.dst_port = d.dst_port;
                    }
                }
                Err(e) => warn!(path = %path.display(), frame = frame_index, "dissection failed: {e}"),
            },
            None => warn!(
                path = %path.display(),
                frame = frame_index,
                linktype = iface.linktype.0,
                "unsupported link type"
            ),
        }
        frame_index += 1;
        packets.push(raw);
    };

    loop {
        match reader.next() {
            Ok((offset, block)) => {
                match block {
                    PcapBlockOwned::LegacyHeader(header) => {
                        let resolution = if header.is_nanosecond_precision() {
                            1_000_000_000
                        } else {
                            1_000_000
                        };
                        legacy = Some(Interface {
                            link: LinkKind::from_linktype(header.network.0),
                            linktype: header.network,
                            ts_offset: 0,
                            resolution,
                        });
                    }
                    PcapBlockOwned::Legacy(frame) => {
                        let iface = legacy
                            .as_ref()
                            .ok_or_else(|| parse_error(path, "frame before file header"))?;
                        let ts = frame.ts_sec as f64 + frame.ts_usec as f64 / iface.resolution as f64;
                        push(&mut packets, iface, ts, frame.origlen, frame.data);
                    }
                    PcapBlockOwned::NG(Block::SectionHeader(_)) => interfaces.clear(),
                    PcapBlockOwned::NG(Block::InterfaceDescription(idb)) => {
                        interfaces.push(Interface {
                            link: LinkKind::from_linktype(idb.linktype.0),
                            linktype: idb.linktype,
                            ts_offset: idb.ts_offset().max(0) as u64,
                            resolution: idb.ts_resolution().unwrap_or(1_000_000),
                        });
                    }
                    PcapBlockOwned::NG(Block::EnhancedPacket(epb)) => {
                        let iface = interfaces
                            .get(epb.if_id as usize)
                            .ok_or_else(|| parse_error(path, "packet references unknown interface"))?;
                        let ts = epb.decode_ts_f64(iface.ts_offset, iface.resolution);
                        let data = &epb.data[..(epb.caplen as usize).min(epb.data.len())];
                        push(&mut packets, iface, ts, epb.origlen, data);
                    }
                    PcapBlockOwned::NG(Block::SimplePacket(spb)) => {
                        let iface = interfaces
                            .first()
                            .ok_or_else(|| parse_error(path, "packet references unknown interface"))?;
                        push(&mut packets, iface, 0.0, spb.origlen, spb.data);
                    }
                    PcapBlockOwned::NG(_) => {}
                }
                reader.consume(offset);
            }
            Err(PcapError::Eof) => break,
            Err(PcapError::Incomplete(_)) => {
                reader
                    .refill()
                    .map_err(|e| parse_error(path, format!("read failed: {e:?}")))?;
            }
            Err(PcapError::BufferTooSmall) => {
                let grown = reader.data().len().max(READ_BUFFER) * 2;
                if !reader.grow(grown) {
                    return Err(parse_error(path, "frame exceeds maximum buffer size"));
                }
                reader
                    .refill()
                    .map_err(|e| parse_error(path, format!("read failed: {e:?}")))?;
            }
            Err(PcapError::UnexpectedEof) => {
                return Err(parse_error(path, "truncated capture"));
            }
            Err(e) => return Err(parse_error(path, format!("{e:?}"))),
        }
    }

    if packets.is_empty() {
        warn!(path = %path.display(), "capture contains no packets");
    }
    Ok(packets)
}

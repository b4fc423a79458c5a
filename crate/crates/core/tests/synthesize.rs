mod common;

use etherparse::{NetSlice, SlicedPacket, TransportSlice};
use iotflow_core::ingest::{normalize, parse_capture, Direction, PacketRecord};
use iotflow_core::reconstruct::SyntheticWindow;
use iotflow_core::synthesize::{build_packets, serialize, write_capture, Addressing, Stack};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STACKS: [Stack; 9] = [
    Stack::Tcp,
    Stack::Udp,
    Stack::Icmp,
    Stack::Icmpv6,
    Stack::IpOnly,
    Stack::Arp,
    Stack::Eapol,
    Stack::Llc,
    Stack::Generic,
];
const PORTS: [u16; 8] = [53, 67, 80, 123, 443, 1900, 5353, 8883];

/// A record as reconstruction emits it: flags are those its stack and ports
/// produce, and address-less stacks are incoming.
fn realizable<R: Rng>(rng: &mut R, t: f64) -> (PacketRecord, f64) {
    let stack = STACKS[rng.random_range(0..STACKS.len())];
    let frame_length = rng.random_range(stack.min_frame_len()..=1514);
    let port = |rng: &mut R| {
        if rng.random_bool(0.5) {
            PORTS[rng.random_range(0..PORTS.len())]
        } else {
            rng.random_range(1024..=65535)
        }
    };
    let (src_port, dst_port) = if stack.has_ports() { (Some(port(rng)), Some(port(rng))) } else { (None, None) };
    let direction = if stack.has_addresses() && rng.random_bool(0.5) { Direction::Outgoing } else { Direction::Incoming };
    let duration = (rng.random_range(0..5_000_000) as f64) * 1e-6;
    let rec = PacketRecord {
        frame_length,
        direction,
        duration,
        src_port,
        dst_port,
        protocol_flags: stack.wire_flags(src_port, dst_port, frame_length),
        capture_id: "synthetic".into(),
        device_id: "dev".into(),
    };
    (rec, t)
}

fn synthetic(records: Vec<(PacketRecord, f64)>) -> SyntheticWindow {
    let mut clock = 0.0;
    let mut timestamps = Vec::new();
    let mut packets = Vec::new();
    for (r, _) in records {
        timestamps.push(clock);
        clock += r.duration;
        packets.push(r);
    }
    SyntheticWindow { device_id: "dev".into(), capture_id: "synthetic".into(), index: 0, timestamps, packets }
}

fn tcp_out(len: u32, direction: Direction) -> SyntheticWindow {
    let mut r = common::record(len, direction, 0.5);
    r.protocol_flags = Stack::Tcp.wire_flags(r.src_port, r.dst_port, len);
    synthetic(vec![(r, 0.0)])
}

#[test]
fn blueprint_examples() {
    let addressing = Addressing::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bp = &build_packets(&tcp_out(120, Direction::Outgoing), &addressing, 0.0, &mut rng)[0];
    assert_eq!(bp.src.v4, addressing.device);
    assert_eq!(bp.frame_length, 120);
    assert_eq!(bp.payload.len(), 120 - 54);
    assert_eq!(bp.dst_port, Some(443));
    assert_eq!(serialize(bp).len(), 120);

    let bp = &build_packets(&tcp_out(120, Direction::Incoming), &addressing, 0.0, &mut rng)[0];
    assert_eq!(bp.dst.v4, addressing.device);
    assert_ne!(bp.src.v4, addressing.device);

    let bp = &build_packets(&tcp_out(10, Direction::Outgoing), &addressing, 0.0, &mut rng)[0];
    assert_eq!(bp.frame_length, 54);
    assert!(bp.payload.is_empty());
}

#[test]
fn headers_check_out_in_an_independent_dissector() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let recs: Vec<_> = (0..200).map(|_| realizable(&mut rng, 0.0)).collect();
    let w = synthetic(recs);
    for bp in build_packets(&w, &Addressing::default(), 0.0, &mut rng) {
        let frame = serialize(&bp);
        let Ok(sliced) = SlicedPacket::from_ethernet(&frame) else { continue };
        if let Some(NetSlice::Ipv4(ip)) = &sliced.net {
            let h = ip.header().to_header();
            assert_eq!(h.header_checksum, h.calc_header_checksum());
            assert_eq!(h.total_len as usize, frame.len() - 14);
            match &sliced.transport {
                Some(TransportSlice::Tcp(tcp)) => {
                    let want = tcp.to_header().calc_checksum_ipv4(&h, tcp.payload()).unwrap();
                    assert_eq!(tcp.checksum(), want);
                }
                Some(TransportSlice::Udp(udp)) => {
                    let want = udp.to_header().calc_checksum_ipv4(&h, udp.payload()).unwrap();
                    assert_eq!(udp.checksum(), want);
                }
                _ => {}
            }
        }
    }
}

#[test]
fn empty_capture_and_microsecond_stamps() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.pcap");
    write_capture(&[], &empty).unwrap();
    assert!(parse_capture(&empty).unwrap().is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut w = tcp_out(100, Direction::Outgoing);
    w.packets.push(w.packets[0].clone());
    w.timestamps.push(0.123457);
    let bps = build_packets(&w, &Addressing::default(), 1_700_000_000.000001, &mut rng);
    let path = dir.path().join("stamps.pcap");
    write_capture(&bps, &path).unwrap();
    let raws = parse_capture(&path).unwrap();
    assert_eq!(raws.len(), 2);
    for (raw, bp) in raws.iter().zip(&bps) {
        assert_eq!((raw.timestamp * 1e6).round(), (bp.timestamp * 1e6).round());
    }
    // Same metadata, fresh payload bytes.
    assert_ne!(bps[0].payload, bps[1].payload);
}

fn round_trip(seed: u64, n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let recs: Vec<_> = (0..n).map(|_| realizable(&mut rng, 0.0)).collect();
    let w = synthetic(recs);
    let addressing = Addressing::default();
    let bps = build_packets(&w, &addressing, 0.0, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.pcap");
    write_capture(&bps, &path).unwrap();
    let raws = parse_capture(&path).unwrap();
    let back = normalize(&raws, &addressing.device.to_string(), "synthetic", "dev");
    assert_eq!(back.len(), w.packets.len());
    for (b, p) in back.iter().zip(&w.packets) {
        assert_eq!(
            (b.frame_length, b.direction, b.src_port, b.dst_port, b.protocol_flags),
            (p.frame_length, p.direction, p.src_port, p.dst_port, p.protocol_flags),
            "{p:?}"
        );
        assert!((b.duration - p.duration).abs() < 2e-6 || b.duration == 0.0);
    }
    let mut again = ChaCha8Rng::seed_from_u64(seed);
    let recs2: Vec<_> = (0..n).map(|_| realizable(&mut again, 0.0)).collect();
    let bps2 = build_packets(&synthetic(recs2), &addressing, 0.0, &mut again);
    assert_eq!(bps, bps2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn write_then_parse_recovers_metadata(seed in any::<u64>(), n in 1usize..40) {
        round_trip(seed, n);
    }
}

//! Synthetic capture corpus with known structure, for tests and demos.
//!
//! Each pseudo-device emits a stream of events: planted signature bursts with
//! per-packet length jitter, and background exchanges at fixed lengths. Gaps
//! inside an event and between events come from a mix of duration magnitudes.
//! Everything the generator planted is written to `ground_truth.json`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Direction, PacketRecord};
use crate::reconstruct::SyntheticWindow;
use crate::seed;
use crate::synthesize::{build_packets, write_capture, Addressing, Stack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transport {
    Tcp,
    Udp,
}

impl Transport {
    fn stack(self) -> Stack {
        match self {
            Transport::Tcp => Stack::Tcp,
            Transport::Udp => Stack::Udp,
        }
    }
}

/// One packet of an event, before jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPacket {
    pub length: u32,
    pub direction: Direction,
}

/// A recurring exchange with one service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEvent {
    pub name: String,
    pub packets: Vec<ToyPacket>,
    /// Planted events get uniform length jitter of `±jitter`.
    pub planted: bool,
    pub transport: Transport,
    pub device_port: u16,
    pub remote_port: u16,
    /// Relative frequency among the device's events.
    pub weight: f64,
}

/// Gap magnitude, in seconds, and its relative frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Magnitude {
    pub seconds: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDevice {
    pub id: String,
    pub events: Vec<ToyEvent>,
    /// Gap between packets of one event.
    pub intra_gap: Magnitude,
    /// Gaps between events.
    pub inter_gaps: Vec<Magnitude>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub devices: Vec<ToyDevice>,
    pub captures_per_device: usize,
    pub packets_per_capture: usize,
    pub jitter: u32,
}

/// Ground-truth range of one planted position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRange {
    pub min_len: u32,
    pub max_len: u32,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSignature {
    pub device_id: String,
    pub name: String,
    pub ranges: Vec<PlantedRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub spec: ToySpec,
    pub signatures: Vec<PlantedSignature>,
}

fn event(
    name: &str,
    planted: bool,
    transport: Transport,
    ports: (u16, u16),
    weight: f64,
    packets: &[(u32, Direction)],
) -> ToyEvent {
    ToyEvent {
        name: name.into(),
        packets: packets
            .iter()
            .map(|&(length, direction)| ToyPacket { length, direction })
            .collect(),
        planted,
        transport,
        device_port: ports.0,
        remote_port: ports.1,
        weight,
    }
}

impl Default for ToySpec {
    /// Two devices with two planted signatures each.
    fn default() -> Self {
        use Direction::{Incoming as In, Outgoing as Out};
        use Transport::{Tcp, Udp};
        let gaps = |fast: f64, slow: f64| {
            vec![
                Magnitude { seconds: fast, weight: 0.6 },
                Magnitude { seconds: slow, weight: 0.4 },
            ]
        };
        let camera = ToyDevice {
            id: "toy-camera".into(),
            events: vec![
                event("heartbeat", true, Tcp, (50123, 443), 3.0, &[(120, Out), (309, In)]),
                event("snapshot", true, Tcp, (50123, 443), 2.0, &[(235, Out), (880, In), (452, In), (180, Out)]),
                event("ack", false, Tcp, (50123, 443), 2.0, &[(66, In), (66, Out)]),
                event("dns", false, Udp, (40001, 53), 1.0, &[(78, Out), (142, In)]),
            ],
            intra_gap: Magnitude { seconds: 0.002, weight: 1.0 },
            inter_gaps: gaps(0.5, 20.0),
        };
        let plug = ToyDevice {
            id: "toy-plug".into(),
            events: vec![
                event("status", true, Tcp, (48800, 8883), 3.0, &[(200, Out), (540, In), (74, Out)]),
                event("telemetry", true, Udp, (5683, 5683), 2.0, &[(97, Out), (97, In)]),
                event("ack", false, Tcp, (48800, 8883), 1.5, &[(66, In)]),
                event("ntp", false, Udp, (123, 123), 0.5, &[(76, Out), (76, In)]),
            ],
            intra_gap: Magnitude { seconds: 0.004, weight: 1.0 },
            inter_gaps: gaps(1.0, 60.0),
        };
        ToySpec {
            devices: vec![camera, plug],
            captures_per_device: 20,
            packets_per_capture: 90,
            jitter: 3,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() || self.captures_per_device == 0 || self.packets_per_capture == 0 {
            return Err(Error::Config("toy spec needs devices, captures and packets".into()));
        }
        for d in &self.devices {
            if d.events.is_empty() || d.inter_gaps.is_empty() {
                return Err(Error::Config(format!("toy device {} needs events and gaps", d.id)));
            }
            for e in &d.events {
                let min = e.transport.stack().min_frame_len();
                let short = e.packets.iter().any(|p| p.length < min + self.jitter);
                if e.packets.is_empty() || short || !(e.weight > 0.0) {
                    return Err(Error::Config(format!(
                        "event {} of {} needs packets of at least {} bytes and a positive weight",
                        e.name,
                        d.id,
                        min + self.jitter
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn planted(&self) -> Vec<PlantedSignature> {
        let j = self.jitter;
        self.devices
            .iter()
            .flat_map(|d| {
                d.events.iter().filter(|e| e.planted).map(move |e| PlantedSignature {
                    device_id: d.id.clone(),
                    name: e.name.clone(),
                    ranges: e
                        .packets
                        .iter()
                        .map(|p| PlantedRange {
                            min_len: p.length - j,
                            max_len: p.length + j,
                            direction: p.direction,
                        })
                        .collect(),
                })
            })
            .collect()
    }
}

fn pick<R: Rng + ?Sized>(weights: impl Iterator<Item = f64> + Clone, rng: &mut R) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if u < w {
            return i;
        }
        u -= w;
        last = i;
    }
    last
}

/// A gap around `seconds`, spread by a factor of up to 1.5 either way.
fn gap<R: Rng + ?Sized>(seconds: f64, rng: &mut R) -> f64 {
    seconds * 1.5f64.powf(rng.random_range(-1.0..=1.0))
}

/// Records of one capture. The jitter offset of every planted position
/// cycles through all values before turning random, so each extreme occurs.
/// `cycles[event][position]` carries that progress across captures.
fn capture_records<R: Rng + ?Sized>(
    device: &ToyDevice,
    spec: &ToySpec,
    capture_id: &str,
    cycles: &mut [Vec<i64>],
    rng: &mut R,
) -> (Vec<PacketRecord>, Vec<f64>) {
    let j = spec.jitter as i64;
    let span = 2 * j + 1;
    let mut records = Vec::new();
    let mut timestamps = Vec::new();
    let mut clock = 0.0;
    while records.len() < spec.packets_per_capture {
        let ei = pick(device.events.iter().map(|e| e.weight), rng);
        let e = &device.events[ei];
        for (i, p) in e.packets.iter().enumerate() {
            if records.len() == spec.packets_per_capture {
                break;
            }
            let offset = if !e.planted || j == 0 {
                0
            } else if cycles[ei][i] < span {
                cycles[ei][i] += 1;
                cycles[ei][i] - 1 - j
            } else {
                rng.random_range(-j..=j)
            };
            let frame_length = (p.length as i64 + offset) as u32;
            let (src_port, dst_port) = match p.direction {
                Direction::Outgoing => (e.device_port, e.remote_port),
                Direction::Incoming => (e.remote_port, e.device_port),
            };
            let (src_port, dst_port) = (Some(src_port), Some(dst_port));
            let stack = e.transport.stack();
            timestamps.push(clock);
            let last = i + 1 == e.packets.len();
            let g = if last {
                let m = &device.inter_gaps[pick(device.inter_gaps.iter().map(|m| m.weight), rng)];
                gap(m.seconds, rng)
            } else {
                gap(device.intra_gap.seconds, rng)
            };
            // Microsecond resolution, as written to disk.
            let g = (g * 1e6).round() / 1e6;
            clock += g;
            records.push(PacketRecord {
                frame_length,
                direction: p.direction,
                duration: g,
                src_port,
                dst_port,
                protocol_flags: stack.wire_flags(src_port, dst_port, frame_length),
                capture_id: capture_id.to_string(),
                device_id: device.id.clone(),
            });
        }
    }
    (records, timestamps)
}

/// Write `root/<device>/capture_NN.pcap` for every device plus
/// `root/ground_truth.json`. Output is byte-identical for a given seed.
pub fn make_toy_corpus(spec: &ToySpec, seed: u64, root: &Path) -> Result<GroundTruth> {
    spec.validate()?;
    let addressing = Addressing::default();
    for device in &spec.devices {
        let mut rng = seed::rng(seed::derive(seed, &format!("toy/{}", device.id)));
        let mut cycles: Vec<Vec<i64>> = device.events.iter().map(|e| vec![0; e.packets.len()]).collect();
        for c in 0..spec.captures_per_device {
            let capture_id = format!("capture_{c:02}");
            let (packets, timestamps) = capture_records(device, spec, &capture_id, &mut cycles, &mut rng);
            let window = SyntheticWindow {
                device_id: device.id.clone(),
                capture_id: capture_id.clone(),
                index: c,
                timestamps,
                packets,
            };
            let blueprints = build_packets(&window, &addressing, 0.0, &mut rng);
            write_capture(&blueprints, &root.join(&device.id).join(format!("{capture_id}.pcap")))?;
        }
    }
    let truth = GroundTruth {
        seed,
        spec: spec.clone(),
        signatures: spec.planted(),
    };
    crate::jsonl::write_json(&root.join("ground_truth.json"), &truth)?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid_and_plants_the_heartbeat() {
        let spec = ToySpec::default();
        spec.validate().unwrap();
        let planted = spec.planted();
        assert_eq!(planted.len(), 4);
        let hb = &planted[0];
        assert_eq!(hb.ranges[0], PlantedRange { min_len: 117, max_len: 123, direction: Direction::Outgoing });
        assert_eq!(hb.ranges[1], PlantedRange { min_len: 306, max_len: 312, direction: Direction::Incoming });
    }

    #[test]
    fn records_have_requested_size_and_jitter_bounds() {
        let spec = ToySpec::default();
        let d = &spec.devices[0];
        let mut rng = seed::rng(1);
        let mut cycles: Vec<Vec<i64>> = d.events.iter().map(|e| vec![0; e.packets.len()]).collect();
        let (records, ts) = capture_records(d, &spec, "c", &mut cycles, &mut rng);
        assert_eq!(records.len(), spec.packets_per_capture);
        assert_eq!(ts.len(), records.len());
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        let heartbeat_out: Vec<u32> = records
            .iter()
            .filter(|r| r.direction == Direction::Outgoing && (117..=123).contains(&r.frame_length))
            .map(|r| r.frame_length)
            .collect();
        if cycles[0][0] == 7 {
            assert!(heartbeat_out.contains(&117) && heartbeat_out.contains(&123));
        }
    }
}

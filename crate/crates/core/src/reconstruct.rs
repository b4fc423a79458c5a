//! From generated code sequences back to concrete packet metadata.
//!
//! Frame lengths come from a small MLP that looks at neighbouring frame
//! tokens and codes, the previously emitted lengths and a noise vector.
//! Signature slots are clamped into their mined range, orphan tokens emit
//! their own length, and durations are sampled from the token's partition.

use std::path::Path;

use candle_core::{DType, Module, Tensor};
use candle_nn::{Embedding, Linear, Optimizer};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::durations::DurationModel;
use crate::error::{Error, Result};
use crate::ingest::{Direction, PacketRecord, TrafficWindow};
use crate::nn::{self, ParamStore};
use crate::seed;
use crate::signatures::{FrameTokenKind, FrameVocab, TokenizedWindow};
use crate::synthesize::Stack;
use crate::vqstae::{DecodedPacket, PortVocab, PORT_NONE, PORT_UNK};

/// One synthesized window; `timestamps[i]` is the sum of the first `i` durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWindow {
    pub device_id: String,
    /// Synthetic batch the window belongs to.
    pub capture_id: String,
    pub index: usize,
    pub timestamps: Vec<f64>,
    pub packets: Vec<PacketRecord>,
}

impl SyntheticWindow {
    /// Inverse of `to_traffic_window`; timestamps are rebuilt from durations.
    pub fn from_traffic_window(w: &TrafficWindow) -> Self {
        let mut clock = 0.0;
        let timestamps = w
            .packets
            .iter()
            .map(|p| {
                let t = clock;
                clock += p.duration;
                t
            })
            .collect();
        SyntheticWindow {
            device_id: w.device_id.clone(),
            capture_id: w.capture_id.clone(),
            index: w.start_offset,
            timestamps,
            packets: w.packets.clone(),
        }
    }

    pub fn to_traffic_window(&self) -> TrafficWindow {
        TrafficWindow {
            device_id: self.device_id.clone(),
            capture_id: self.capture_id.clone(),
            start_offset: self.index,
            packets: self.packets.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameLengthConfig {
    /// Frame tokens and codes at `t-w..=t+w` are visible.
    pub window: usize,
    /// Number of previous lengths fed back.
    pub look_behind: usize,
    pub noise_dim: usize,
    pub embedding: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for FrameLengthConfig {
    fn default() -> Self {
        FrameLengthConfig {
            window: 2,
            look_behind: 2,
            noise_dim: 8,
            embedding: 16,
            hidden: 128,
            epochs: 30,
            batch_size: 256,
            learning_rate: 3e-3,
        }
    }
}

struct Net {
    frame_emb: Embedding,
    code_emb: Embedding,
    length_emb: Embedding,
    l1: Linear,
    l2: Linear,
    out: Linear,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: FrameLengthConfig,
    lengths: Vec<u32>,
    orphan_lengths: Vec<u32>,
    frame_arity: usize,
    code_arity: usize,
    accuracy: Vec<f64>,
}

pub struct FrameLengthModel {
    pub config: FrameLengthConfig,
    /// Output classes: sorted distinct training lengths.
    pub lengths: Vec<u32>,
    /// Lengths of orphan-token packets in training, with repetition.
    pub orphan_lengths: Vec<u32>,
    pub frame_arity: usize,
    pub code_arity: usize,
    /// Training accuracy per epoch.
    pub accuracy: Vec<f64>,
    params: ParamStore,
    net: Net,
}

/// Inputs of a batch of positions.
struct Inputs {
    n: usize,
    frames: Vec<u32>,
    codes: Vec<u32>,
    previous: Vec<u32>,
}

impl FrameLengthModel {
    fn build(
        config: FrameLengthConfig,
        lengths: Vec<u32>,
        orphan_lengths: Vec<u32>,
        frame_arity: usize,
        code_arity: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParamStore::new(seed, DType::F32);
        let span = 2 * config.window + 1;
        let e = config.embedding;
        let input = span * 2 * e + config.look_behind * e + config.noise_dim;
        let net = Net {
            frame_emb: nn::embedding(&mut params, "fl.frame", frame_arity + 1, e)?,
            code_emb: nn::embedding(&mut params, "fl.code", code_arity + 1, e)?,
            length_emb: nn::embedding(&mut params, "fl.length", lengths.len() + 1, e)?,
            l1: nn::linear(&mut params, "fl.l1", input, config.hidden)?,
            l2: nn::linear(&mut params, "fl.l2", config.hidden, config.hidden)?,
            out: nn::linear(&mut params, "fl.out", config.hidden, lengths.len())?,
        };
        Ok(FrameLengthModel {
            config,
            lengths,
            orphan_lengths,
            frame_arity,
            code_arity,
            accuracy: Vec::new(),
            params,
            net,
        })
    }

    fn length_pad(&self) -> u32 {
        self.lengths.len() as u32
    }

    /// Class of the nearest known length; ties go to the shorter one.
    pub fn length_class(&self, length: u32) -> usize {
        match self.lengths.binary_search(&length) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) if i == self.lengths.len() => i - 1,
            Err(i) => {
                if length - self.lengths[i - 1] <= self.lengths[i] - length {
                    i - 1
                } else {
                    i
                }
            }
        }
    }

    /// Context ids for position `t`: frame tokens and codes in the sliding
    /// window (PAD outside the sequence) and the previous length classes.
    fn push_context(&self, inputs: &mut Inputs, frames: &[usize], codes: &[usize], previous: &[u32], t: usize) {
        let w = self.config.window as isize;
        for off in -w..=w {
            let i = t as isize + off;
            if i < 0 || i as usize >= frames.len() {
                inputs.frames.push(self.frame_arity as u32);
                inputs.codes.push(self.code_arity as u32);
            } else {
                let i = i as usize;
                inputs.frames.push(frames[i].min(self.frame_arity - 1) as u32);
                inputs.codes.push(codes[i].min(self.code_arity - 1) as u32);
            }
        }
        for back in (1..=self.config.look_behind).rev() {
            inputs
                .previous
                .push(if t >= back { previous[t - back] } else { self.length_pad() });
        }
        inputs.n += 1;
    }

    fn logits<R: Rng + ?Sized>(&self, inputs: &Inputs, rng: &mut R) -> Result<Tensor> {
        let n = inputs.n;
        let span = 2 * self.config.window + 1;
        let e = self.config.embedding;
        let mut parts = vec![
            self.net
                .frame_emb
                .forward(&nn::u32_tensor(&inputs.frames, &[n, span])?)?
                .reshape((n, span * e))?,
            self.net
                .code_emb
                .forward(&nn::u32_tensor(&inputs.codes, &[n, span])?)?
                .reshape((n, span * e))?,
        ];
        if self.config.look_behind > 0 {
            let b = self.config.look_behind;
            parts.push(
                self.net
                    .length_emb
                    .forward(&nn::u32_tensor(&inputs.previous, &[n, b])?)?
                    .reshape((n, b * e))?,
            );
        }
        if self.config.noise_dim > 0 {
            let noise: Vec<f32> = (0..n * self.config.noise_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            parts.push(Tensor::from_vec(noise, (n, self.config.noise_dim), self.params.device())?);
        }
        let x = Tensor::cat(&parts, 1)?;
        let h = self.net.l1.forward(&x)?.relu()?;
        let h = self.net.l2.forward(&h)?.relu()?;
        Ok(self.net.out.forward(&h)?)
    }

    /// Sample lengths for a batch of windows, left to right.
    pub fn predict_many<R: Rng + ?Sized>(
        &self,
        vocab: &FrameVocab,
        frame_tokens: &[Vec<usize>],
        codes: &[Vec<usize>],
        rng: &mut R,
    ) -> Result<Vec<Vec<u32>>> {
        let n = frame_tokens.len();
        if codes.len() != n {
            return Err(Error::LengthMismatch { left: n, right: codes.len() });
        }
        let len = frame_tokens.first().map_or(0, Vec::len);
        if frame_tokens.iter().zip(codes).any(|(f, c)| f.len() != len || c.len() != len) {
            return Err(Error::Data("frame tokens and codes must share one window length".into()));
        }
        let mut out = vec![Vec::with_capacity(len); n];
        let mut previous = vec![Vec::with_capacity(len); n];
        for t in 0..len {
            let mut inputs = Inputs { n: 0, frames: Vec::new(), codes: Vec::new(), previous: Vec::new() };
            for b in 0..n {
                self.push_context(&mut inputs, &frame_tokens[b], &codes[b], &previous[b], t);
            }
            let probs = nn::softmax_rows(&self.logits(&inputs, rng)?)?;
            for b in 0..n {
                let sampled = self.lengths[nn::sample_categorical(&probs[b], rng)];
                let length = match vocab.describe(frame_tokens[b][t]) {
                    FrameTokenKind::Signature { min_len, max_len, .. } => sampled.clamp(min_len, max_len),
                    FrameTokenKind::Orphan { frame_length, .. } => frame_length,
                    FrameTokenKind::Unk if !self.orphan_lengths.is_empty() => {
                        self.orphan_lengths[rng.random_range(0..self.orphan_lengths.len())]
                    }
                    FrameTokenKind::Unk => sampled,
                };
                previous[b].push(self.length_class(length) as u32);
                out[b].push(length);
            }
        }
        Ok(out)
    }

    pub fn predict_frame_lengths<R: Rng + ?Sized>(
        &self,
        vocab: &FrameVocab,
        frame_tokens: &[usize],
        codes: &[usize],
        rng: &mut R,
    ) -> Result<Vec<u32>> {
        Ok(self
            .predict_many(vocab, &[frame_tokens.to_vec()], &[codes.to_vec()], rng)?
            .remove(0))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let m = Manifest {
            config: self.config.clone(),
            lengths: self.lengths.clone(),
            orphan_lengths: self.orphan_lengths.clone(),
            frame_arity: self.frame_arity,
            code_arity: self.code_arity,
            accuracy: self.accuracy.clone(),
        };
        crate::jsonl::write_json(&dir.join("frame_lengths.json"), &m)?;
        self.params.save(&dir.join("frame_lengths.safetensors"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = crate::jsonl::read_json(&dir.join("frame_lengths.json"))?;
        let mut model = Self::build(m.config, m.lengths, m.orphan_lengths, m.frame_arity, m.code_arity, 0)?;
        model.params.load(&dir.join("frame_lengths.safetensors"))?;
        model.accuracy = m.accuracy;
        Ok(model)
    }
}

/// Teacher-forced training on real lengths, tokens and encoder codes.
///
/// `windows[i]` are the real packets behind `tokens[i]`, and `codes[i]` its
/// encoding.
pub fn train_frame_length_model(
    windows: &[TrafficWindow],
    tokens: &[TokenizedWindow],
    codes: &[Vec<usize>],
    vocab: &FrameVocab,
    code_arity: usize,
    cfg: &FrameLengthConfig,
    seed: u64,
) -> Result<FrameLengthModel> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to train the frame length model on".into()));
    }
    if windows.len() != tokens.len() || windows.len() != codes.len() {
        return Err(Error::LengthMismatch { left: windows.len(), right: tokens.len().min(codes.len()) });
    }
    let mut lengths: Vec<u32> = windows.iter().flat_map(|w| w.packets.iter().map(|p| p.frame_length)).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut orphan_lengths: Vec<u32> = Vec::new();
    for (w, t) in windows.iter().zip(tokens) {
        for (p, tp) in w.packets.iter().zip(&t.packets) {
            if !matches!(vocab.describe(tp.frame_token), FrameTokenKind::Signature { .. }) {
                orphan_lengths.push(p.frame_length);
            }
        }
    }
    orphan_lengths.sort_unstable();
    let mut model = FrameLengthModel::build(
        cfg.clone(),
        lengths,
        orphan_lengths,
        vocab.len(),
        code_arity,
        seed::derive(seed, "frame_lengths.params"),
    )?;

    let mut all = Inputs { n: 0, frames: Vec::new(), codes: Vec::new(), previous: Vec::new() };
    let mut targets = Vec::new();
    for ((w, t), c) in windows.iter().zip(tokens).zip(codes) {
        let frames: Vec<usize> = t.packets.iter().map(|p| p.frame_token).collect();
        let previous: Vec<u32> = w.packets.iter().map(|p| model.length_class(p.frame_length) as u32).collect();
        for pos in 0..frames.len() {
            model.push_context(&mut all, &frames, c, &previous, pos);
            targets.push(previous[pos]);
        }
    }
    let span = 2 * cfg.window + 1;
    let b = cfg.look_behind;
    let mut rng = seed::rng(seed::derive(seed, "frame_lengths.train"));
    let mut opt = nn::adam(model.params.vars(), cfg.learning_rate)?;
    let mut order: Vec<usize> = (0..all.n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let mut batch = Inputs { n: idx.len(), frames: Vec::new(), codes: Vec::new(), previous: Vec::new() };
            let mut y = Vec::with_capacity(idx.len());
            for &i in idx {
                batch.frames.extend_from_slice(&all.frames[i * span..(i + 1) * span]);
                batch.codes.extend_from_slice(&all.codes[i * span..(i + 1) * span]);
                batch.previous.extend_from_slice(&all.previous[i * b..(i + 1) * b]);
                y.push(targets[i]);
            }
            let logits = model.logits(&batch, &mut rng)?;
            let loss = nn::cross_entropy(&logits, &nn::u32_tensor(&y, &[y.len()])?)?;
            opt.backward_step(&loss)?;
            let predicted = logits.argmax(1)?.to_vec1::<u32>()?;
            correct += predicted.iter().zip(&y).filter(|(p, t)| p == t).count();
        }
        let acc = correct as f64 / all.n as f64;
        debug!(epoch, acc, "frame length epoch");
        model.accuracy.push(acc);
    }
    Ok(model)
}

/// Everything needed to turn decoded code sequences into packet records.
pub struct Reconstructor<'a> {
    pub vocab: &'a FrameVocab,
    pub lengths: &'a FrameLengthModel,
    pub durations: &'a DurationModel,
    pub ports: &'a PortVocab,
}

impl Reconstructor<'_> {
    /// Combine decoded fields with predicted lengths and sampled durations.
    ///
    /// The frame token's own direction overrides the decoded one. Records are
    /// made realizable on the wire: the header stack comes from the decoded
    /// flags, falling back to a smaller stack when the length cannot hold its
    /// headers; ports exist exactly when the stack has them; and flags are
    /// those the stack and ports produce. Address-less stacks are incoming,
    /// as ingest labels them.
    pub fn assemble_flow<R: Rng + ?Sized>(
        &self,
        decoded: &[DecodedPacket],
        lengths: &[u32],
        device_id: &str,
        capture_id: &str,
        index: usize,
        rng: &mut R,
    ) -> Result<SyntheticWindow> {
        if decoded.len() != lengths.len() {
            return Err(Error::LengthMismatch { left: decoded.len(), right: lengths.len() });
        }
        let mut packets = Vec::with_capacity(decoded.len());
        let mut timestamps = Vec::with_capacity(decoded.len());
        let mut clock = 0.0;
        for (d, &length) in decoded.iter().zip(lengths) {
            let duration = self.durations.sample_duration(d.duration_token, rng)?;
            let mut direction = self.vocab.describe(d.frame_token).direction().unwrap_or(d.direction);
            let decoded_stack = Stack::for_flags(d.protocol_flags);
            let stack = [decoded_stack, Stack::Udp, Stack::IpOnly, Stack::Generic]
                .into_iter()
                .find(|s| s.min_frame_len() <= length)
                .unwrap_or(Stack::Generic);
            let frame_length = length.max(stack.min_frame_len());
            let (src_port, dst_port) = if stack.has_ports() {
                let pick = |id: usize, rng: &mut R| {
                    let id = if id == PORT_NONE { PORT_UNK } else { id };
                    self.ports.port(id, rng)
                };
                (pick(d.src_port_id, rng), pick(d.dst_port_id, rng))
            } else {
                (None, None)
            };
            if !stack.has_addresses() {
                direction = Direction::Incoming;
            }
            timestamps.push(clock);
            clock += duration;
            packets.push(PacketRecord {
                frame_length,
                direction,
                duration,
                src_port,
                dst_port,
                protocol_flags: stack.wire_flags(src_port, dst_port, frame_length),
                capture_id: capture_id.to_string(),
                device_id: device_id.to_string(),
            });
        }
        Ok(SyntheticWindow {
            device_id: device_id.to_string(),
            capture_id: capture_id.to_string(),
            index,
            timestamps,
            packets,
        })
    }

    /// Lengths for every sequence, then assembly, all from one seeded stream.
    pub fn reconstruct_many(
        &self,
        decoded: &[Vec<DecodedPacket>],
        codes: &[Vec<usize>],
        device_id: &str,
        capture_id: &str,
        seed: u64,
    ) -> Result<Vec<SyntheticWindow>> {
        let mut rng = seed::rng(seed);
        let frames: Vec<Vec<usize>> = decoded
            .iter()
            .map(|w| w.iter().map(|p| p.frame_token).collect())
            .collect();
        let lengths = self.lengths.predict_many(self.vocab, &frames, codes, &mut rng)?;
        decoded
            .iter()
            .zip(&lengths)
            .enumerate()
            .map(|(i, (d, l))| self.assemble_flow(d, l, device_id, capture_id, i, &mut rng))
            .collect()
    }
}

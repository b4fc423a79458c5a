//! Vector-quantized sequence-transformer autoencoder.
//!
//! Each packet's feature vector is embedded, mixed across the window by a
//! transformer encoder, and snapped to its nearest codebook entry, giving one
//! code per packet. A transformer decoder maps the code sequence back to every
//! feature through one classification head per field.

mod codebook;
mod features;

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Module, Tensor};
use candle_nn::{Embedding, Linear, Optimizer};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

pub use codebook::{quantize, Codebook};
pub use features::{featurize, Arities, FeatureVector, PortVocab, PORT_NONE, PORT_UNK};

use crate::error::{Error, Result};
use crate::ingest::{Direction, Protocol, ProtocolFlags};
use crate::nn::{self, LayerNorm, ParamStore, TransformerLayer};
use crate::seed;
use crate::signatures::TokenizedWindow;

const MANIFEST_VERSION: u32 = 1;
const INFERENCE_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqstaeConfig {
    /// Codebook size.
    pub k: usize,
    /// Latent and model width.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub beta: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_ports: usize,
    pub min_port_count: usize,
}

impl Default for VqstaeConfig {
    fn default() -> Self {
        VqstaeConfig {
            k: 64,
            d: 64,
            heads: 4,
            layers: 2,
            beta: 0.25,
            ema_decay: 0.99,
            epochs: 150,
            batch_size: 32,
            learning_rate: 2e-3,
            max_ports: 32,
            min_port_count: 2,
        }
    }
}

impl VqstaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("codebook size must be >= 2, got {}", self.k)));
        }
        if self.d < 1 {
            return Err(Error::Config("latent width must be >= 1".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "latent width {} must be divisible by head count {}",
                self.d, self.heads
            )));
        }
        if self.layers == 0 || self.batch_size == 0 {
            return Err(Error::Config("layers and batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.beta < 0.0 || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "need 0 <= ema_decay < 1, beta >= 0 and a positive learning rate".into(),
            ));
        }
        Ok(())
    }
}

/// How latents reach the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Nearest codebook entry with a straight-through gradient.
    Nearest,
    /// Latents pass through unchanged.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
    pub codes_used: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedPacket {
    pub frame_token: usize,
    pub duration_token: usize,
    pub direction: Direction,
    pub protocol_flags: ProtocolFlags,
    pub src_port_id: usize,
    pub dst_port_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldAccuracy {
    pub frame: f64,
    pub duration: f64,
    pub direction: f64,
    pub flags: f64,
    pub src_port: f64,
    pub dst_port: f64,
}

struct Net {
    frame_emb: Embedding,
    duration_emb: Embedding,
    direction_emb: Embedding,
    flag_proj: Linear,
    src_port_emb: Embedding,
    dst_port_emb: Embedding,
    enc_pos: Tensor,
    encoder: Vec<TransformerLayer>,
    enc_norm: LayerNorm,
    enc_out: Linear,
    dec_pos: Tensor,
    decoder: Vec<TransformerLayer>,
    dec_norm: LayerNorm,
    frame_head: Linear,
    duration_head: Linear,
    direction_head: Linear,
    flag_head: Linear,
    src_port_head: Linear,
    dst_port_head: Linear,
}

struct Heads {
    frame: Tensor,
    duration: Tensor,
    direction: Tensor,
    flags: Tensor,
    src_port: Tensor,
    dst_port: Tensor,
}

struct Batch {
    size: usize,
    frame: Tensor,
    duration: Tensor,
    direction: Tensor,
    flags: Tensor,
    src_port: Tensor,
    dst_port: Tensor,
}

impl Net {
    fn new(ps: &mut ParamStore, cfg: &VqstaeConfig, arities: &Arities, seq_len: usize) -> Result<Self> {
        let d = cfg.d;
        let encoder = (0..cfg.layers)
            .map(|i| TransformerLayer::new(ps, &format!("enc.layer{i}"), d, cfg.heads))
            .collect::<Result<_>>()?;
        let mut net = Net {
            frame_emb: nn::embedding(ps, "enc.frame", arities.frame, d)?,
            duration_emb: nn::embedding(ps, "enc.duration", arities.duration, d)?,
            direction_emb: nn::embedding(ps, "enc.direction", 2, d)?,
            flag_proj: nn::linear(ps, "enc.flags", Protocol::COUNT, d)?,
            src_port_emb: nn::embedding(ps, "enc.src_port", arities.port, d)?,
            dst_port_emb: nn::embedding(ps, "enc.dst_port", arities.port, d)?,
            enc_pos: ps.normal("enc.pos", &[seq_len, d], 1.0)?,
            encoder,
            enc_norm: LayerNorm::new(ps, "enc.norm", d)?,
            enc_out: nn::linear(ps, "enc.out", d, d)?,
            dec_pos: ps.normal("dec.pos", &[seq_len, d], 1.0)?,
            decoder: Vec::new(),
            dec_norm: LayerNorm::new(ps, "dec.norm", d)?,
            frame_head: nn::linear(ps, "dec.frame", d, arities.frame)?,
            duration_head: nn::linear(ps, "dec.duration", d, arities.duration)?,
            direction_head: nn::linear(ps, "dec.direction", d, 2)?,
            flag_head: nn::linear(ps, "dec.flags", d, Protocol::COUNT)?,
            src_port_head: nn::linear(ps, "dec.src_port", d, arities.port)?,
            dst_port_head: nn::linear(ps, "dec.dst_port", d, arities.port)?,
        };
        for i in 0..cfg.layers {
            net.decoder
                .push(TransformerLayer::new(ps, &format!("dec.layer{i}"), d, cfg.heads)?);
        }
        Ok(net)
    }

    fn encode(&self, b: &Batch) -> candle_core::Result<Tensor> {
        let x = (self.frame_emb.forward(&b.frame)?
            + self.duration_emb.forward(&b.duration)?)?;
        let x = (x + self.direction_emb.forward(&b.direction)?)?;
        let x = (x + self.flag_proj.forward(&b.flags)?)?;
        let x = (x + self.src_port_emb.forward(&b.src_port)?)?;
        let x = (x + self.dst_port_emb.forward(&b.dst_port)?)?;
        let mut x = x.broadcast_add(&self.enc_pos)?;
        for layer in &self.encoder {
            x = layer.forward(&x)?;
        }
        self.enc_out.forward(&self.enc_norm.forward(&x)?)
    }

    fn decode(&self, latents: &Tensor) -> candle_core::Result<Heads> {
        let mut x = latents.broadcast_add(&self.dec_pos)?;
        for layer in &self.decoder {
            x = layer.forward(&x)?;
        }
        let x = self.dec_norm.forward(&x)?;
        Ok(Heads {
            frame: self.frame_head.forward(&x)?,
            duration: self.duration_head.forward(&x)?,
            direction: self.direction_head.forward(&x)?,
            flags: self.flag_head.forward(&x)?,
            src_port: self.src_port_head.forward(&x)?,
            dst_port: self.dst_port_head.forward(&x)?,
        })
    }
}

/// Sum of the per-head mean losses; every flag is its own binary head.
fn reconstruction_loss(h: &Heads, b: &Batch) -> candle_core::Result<Tensor> {
    let flat = |t: &Tensor| -> candle_core::Result<Tensor> {
        let c = t.dim(2)?;
        t.reshape((b.size * t.dim(1)?, c))
    };
    let ce = |logits: &Tensor, target: &Tensor| {
        nn::cross_entropy(&flat(logits)?, &target.flatten_all()?)
    };
    let flags = (nn::bce_with_logits(&h.flags, &b.flags)? * Protocol::COUNT as f64)?;
    let total = (ce(&h.frame, &b.frame)? + ce(&h.duration, &b.duration)?)?;
    let total = (total + ce(&h.direction, &b.direction)?)?;
    let total = (total + flags)?;
    let total = (total + ce(&h.src_port, &b.src_port)?)?;
    total + ce(&h.dst_port, &b.dst_port)?
}

pub struct VqstaeModel {
    pub config: VqstaeConfig,
    pub arities: Arities,
    pub ports: PortVocab,
    pub seq_len: usize,
    pub codebook: Codebook,
    pub history: Vec<EpochLosses>,
    params: ParamStore,
    net: Net,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: VqstaeConfig,
    arities: Arities,
    ports: PortVocab,
    seq_len: usize,
    codebook: Codebook,
    history: Vec<EpochLosses>,
    parameter_count: usize,
}

/// Output of one forward pass over a batch.
pub struct ForwardPass {
    pub total: Tensor,
    pub reconstruction: Tensor,
    pub commitment: f64,
    pub codes: Vec<usize>,
    pub latents: Vec<f64>,
}

impl VqstaeModel {
    /// Untrained model whose codebook is seeded from initial encoder outputs.
    pub fn init(
        windows: &[TokenizedWindow],
        frame_vocab_len: usize,
        duration_k: usize,
        cfg: &VqstaeConfig,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        cfg.validate()?;
        let first = windows
            .first()
            .ok_or_else(|| Error::Data("no windows to train the autoencoder on".into()))?;
        let seq_len = first.packets.len();
        if seq_len == 0 || windows.iter().any(|w| w.packets.len() != seq_len) {
            return Err(Error::Data("training windows must share one non-zero length".into()));
        }
        if frame_vocab_len == 0 || duration_k == 0 {
            return Err(Error::Config("frame and duration vocabularies must be non-empty".into()));
        }
        let ports = PortVocab::fit(windows, cfg.max_ports, cfg.min_port_count);
        let arities = Arities {
            frame: frame_vocab_len,
            duration: duration_k,
            port: ports.len(),
        };
        let mut params = ParamStore::new(seed::derive(seed, "vqstae.params"), dtype);
        let net = Net::new(&mut params, cfg, &arities, seq_len)?;
        let placeholder = Codebook::from_vectors(cfg.k, cfg.d, vec![0.0; cfg.k * cfg.d])?;
        let mut model = VqstaeModel {
            config: cfg.clone(),
            arities,
            ports,
            seq_len,
            codebook: placeholder,
            history: Vec::new(),
            params,
            net,
        };
        let mut latents = Vec::new();
        for chunk in windows.chunks(INFERENCE_BATCH) {
            let b = model.batch(chunk)?;
            latents.extend(flatten(&model.net.encode(&b)?)?);
        }
        let mut rng = seed::rng(seed::derive(seed, "vqstae.codebook"));
        model.codebook = Codebook::from_latents(cfg.k, cfg.d, &latents, &mut rng)?;
        Ok(model)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn features(&self, window: &TokenizedWindow) -> Result<Vec<FeatureVector>> {
        if window.packets.len() != self.seq_len {
            return Err(Error::VocabMismatch(format!(
                "window has {} packets, model expects {}",
                window.packets.len(),
                self.seq_len
            )));
        }
        let features: Vec<FeatureVector> = window
            .packets
            .iter()
            .map(|p| featurize(p, &self.arities, &self.ports))
            .collect();
        if let Some(bad) = features.iter().find(|f| !f.within(&self.arities)) {
            return Err(Error::VocabMismatch(format!(
                "feature {bad:?} exceeds model arities {:?}",
                self.arities
            )));
        }
        Ok(features)
    }

    fn batch(&self, windows: &[TokenizedWindow]) -> Result<Batch> {
        let mut cols: [Vec<u32>; 5] = Default::default();
        let mut flags = Vec::new();
        for w in windows {
            for f in self.features(w)? {
                cols[0].push(f.frame);
                cols[1].push(f.duration);
                cols[2].push(f.direction);
                cols[3].push(f.src_port);
                cols[4].push(f.dst_port);
                flags.extend(f.flags.iter().map(|&v| v as f64));
            }
        }
        let shape = [windows.len(), self.seq_len];
        let ids = |v: &[u32]| nn::u32_tensor(v, &shape);
        Ok(Batch {
            size: windows.len(),
            frame: ids(&cols[0])?,
            duration: ids(&cols[1])?,
            direction: ids(&cols[2])?,
            src_port: ids(&cols[3])?,
            dst_port: ids(&cols[4])?,
            flags: Tensor::from_vec(
                flags,
                (windows.len(), self.seq_len, Protocol::COUNT),
                self.params.device(),
            )?
            .to_dtype(self.params.dtype())?,
        })
    }

    fn quantized_tensor(&self, codes: &[usize], batch: usize) -> Result<Tensor> {
        let data: Vec<f64> = codes.iter().flat_map(|&c| self.codebook.row(c).iter().copied()).collect();
        Ok(Tensor::from_vec(data, (batch, self.seq_len, self.config.d), self.params.device())?
            .to_dtype(self.params.dtype())?)
    }

    /// Loss of one batch. Gradients reach the encoder straight through the
    /// quantizer; the codebook itself is updated outside autograd.
    pub fn forward(&self, windows: &[TokenizedWindow], mode: QuantizeMode) -> Result<ForwardPass> {
        let b = self.batch(windows)?;
        let z = self.net.encode(&b)?;
        let latents = flatten(&z)?;
        let (codes, decoder_input, commitment) = match mode {
            QuantizeMode::Nearest => {
                let codes: Vec<usize> = latents
                    .chunks_exact(self.config.d)
                    .map(|row| self.codebook.quantize(row))
                    .collect();
                let zq = self.quantized_tensor(&codes, b.size)?;
                let commitment = (&z - &zq)?.sqr()?.mean_all()?;
                let st = (&z + (&zq - &z)?.detach())?;
                (codes, st, commitment)
            }
            QuantizeMode::Identity => {
                let commitment = (&z - z.detach())?.sqr()?.mean_all()?;
                (Vec::new(), z.clone(), commitment)
            }
        };
        let heads = self.net.decode(&decoder_input)?;
        let reconstruction = reconstruction_loss(&heads, &b)?;
        let total = (&reconstruction + (&commitment * self.config.beta)?)?;
        Ok(ForwardPass {
            total,
            reconstruction,
            commitment: nn::scalar(&commitment)?,
            codes,
            latents,
        })
    }

    pub fn encode(&self, window: &TokenizedWindow) -> Result<Vec<usize>> {
        Ok(self.encode_many(std::slice::from_ref(window))?.remove(0))
    }

    pub fn encode_many(&self, windows: &[TokenizedWindow]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFERENCE_BATCH) {
            let b = self.batch(chunk)?;
            let latents = flatten(&self.net.encode(&b)?)?;
            let codes: Vec<usize> = latents
                .chunks_exact(self.config.d)
                .map(|row| self.codebook.quantize(row))
                .collect();
            out.extend(codes.chunks(self.seq_len).map(<[usize]>::to_vec));
        }
        Ok(out)
    }

    pub fn decode(&self, codes: &[usize]) -> Result<Vec<DecodedPacket>> {
        Ok(self.decode_many(&[codes.to_vec()])?.remove(0))
    }

    /// Argmax of every head at every position.
    pub fn decode_many(&self, sequences: &[Vec<usize>]) -> Result<Vec<Vec<DecodedPacket>>> {
        for seq in sequences {
            if seq.len() != self.seq_len {
                return Err(Error::VocabMismatch(format!(
                    "code sequence has {} codes, model expects {}",
                    seq.len(),
                    self.seq_len
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&c| c >= self.config.k) {
                return Err(Error::InvalidToken {
                    token: bad,
                    limit: self.config.k,
                });
            }
        }
        let mut out = Vec::with_capacity(sequences.len());
        for chunk in sequences.chunks(INFERENCE_BATCH) {
            let codes: Vec<usize> = chunk.iter().flatten().copied().collect();
            let h = self.net.decode(&self.quantized_tensor(&codes, chunk.len())?)?;
            let rows = |t: &Tensor| -> Result<Vec<Vec<f64>>> {
                let c = t.dim(2)?;
                Ok(t.reshape((chunk.len() * self.seq_len, c))?
                    .to_dtype(DType::F64)?
                    .to_vec2::<f64>()?)
            };
            let frame = rows(&h.frame)?;
            let duration = rows(&h.duration)?;
            let direction = rows(&h.direction)?;
            let flags = rows(&h.flags)?;
            let src = rows(&h.src_port)?;
            let dst = rows(&h.dst_port)?;
            let packets: Vec<DecodedPacket> = (0..codes.len())
                .map(|i| {
                    let mut bits = [0u8; Protocol::COUNT];
                    for (b, &logit) in bits.iter_mut().zip(&flags[i]) {
                        *b = u8::from(logit > 0.0);
                    }
                    DecodedPacket {
                        frame_token: nn::argmax(&frame[i]),
                        duration_token: nn::argmax(&duration[i]),
                        direction: Direction::from_index(nn::argmax(&direction[i])),
                        protocol_flags: ProtocolFlags::from_array(&bits)
                            .unwrap_or_else(ProtocolFlags::empty),
                        src_port_id: nn::argmax(&src[i]),
                        dst_port_id: nn::argmax(&dst[i]),
                    }
                })
                .collect();
            out.extend(packets.chunks(self.seq_len).map(<[DecodedPacket]>::to_vec));
        }
        Ok(out)
    }

    /// Fraction of positions whose decoded field equals the input field after
    /// a full encode/decode pass.
    pub fn field_accuracy(&self, windows: &[TokenizedWindow]) -> Result<FieldAccuracy> {
        let codes = self.encode_many(windows)?;
        let decoded = self.decode_many(&codes)?;
        let mut hits = [0usize; 6];
        let mut total = 0usize;
        for (w, dec) in windows.iter().zip(&decoded) {
            for (f, d) in self.features(w)?.iter().zip(dec) {
                total += 1;
                hits[0] += usize::from(f.frame as usize == d.frame_token);
                hits[1] += usize::from(f.duration as usize == d.duration_token);
                hits[2] += usize::from(f.direction as usize == d.direction.as_index());
                hits[3] += usize::from(f.protocol_flags() == d.protocol_flags);
                hits[4] += usize::from(f.src_port as usize == d.src_port_id);
                hits[5] += usize::from(f.dst_port as usize == d.dst_port_id);
            }
        }
        let r = |h: usize| if total == 0 { 0.0 } else { h as f64 / total as f64 };
        Ok(FieldAccuracy {
            frame: r(hits[0]),
            duration: r(hits[1]),
            direction: r(hits[2]),
            flags: r(hits[3]),
            src_port: r(hits[4]),
            dst_port: r(hits[5]),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            config: self.config.clone(),
            arities: self.arities,
            ports: self.ports.clone(),
            seq_len: self.seq_len,
            codebook: self.codebook.clone(),
            history: self.history.clone(),
            parameter_count: self.params.parameter_count(),
        };
        crate::jsonl::write_json(&dir.join("manifest.json"), &manifest)?;
        self.params.save(&dir.join("weights.safetensors"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = crate::jsonl::read_json(&dir.join("manifest.json"))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported autoencoder manifest version {}",
                dir.display(),
                m.version
            )));
        }
        let mut params = ParamStore::new(0, DType::F32);
        let net = Net::new(&mut params, &m.config, &m.arities, m.seq_len)?;
        params.load(&dir.join("weights.safetensors"))?;
        Ok(VqstaeModel {
            config: m.config,
            arities: m.arities,
            ports: m.ports,
            seq_len: m.seq_len,
            codebook: m.codebook,
            history: m.history,
            params,
            net,
        })
    }
}

fn flatten(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

pub fn train_vqstae(
    windows: &[TokenizedWindow],
    frame_vocab_len: usize,
    duration_k: usize,
    cfg: &VqstaeConfig,
    seed: u64,
) -> Result<VqstaeModel> {
    let started = Instant::now();
    let mut model = VqstaeModel::init(windows, frame_vocab_len, duration_k, cfg, seed, DType::F32)?;
    let mut opt = nn::adam(model.params.vars(), cfg.learning_rate)?;
    let mut rng = seed::rng(seed::derive(seed, "vqstae.train"));
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut used = vec![false; cfg.k];
        let mut epoch_latents = Vec::new();
        let (mut recon_sum, mut commit_sum, mut steps) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<TokenizedWindow> = idx.iter().map(|&i| windows[i].clone()).collect();
            let pass = model.forward(&batch, QuantizeMode::Nearest)?;
            opt.backward_step(&pass.total)?;
            model.codebook.ema_update(&pass.latents, &pass.codes, cfg.ema_decay);
            for &c in &pass.codes {
                used[c] = true;
            }
            recon_sum += nn::scalar(&pass.reconstruction)?;
            commit_sum += pass.commitment;
            steps += 1;
            epoch_latents = pass.latents;
        }
        let codes_used = used.iter().filter(|&&u| u).count();
        let dead: Vec<bool> = used.iter().map(|&u| !u).collect();
        // The decoder never sees entries moved on the last epoch, so leave them.
        let reseeded = if epoch + 1 < cfg.epochs {
            model.codebook.reseed(&dead, &epoch_latents, &mut rng)
        } else {
            0
        };
        let recon = recon_sum / steps as f64;
        let commit = commit_sum / steps as f64;
        debug!(epoch, recon, commit, codes_used, reseeded, "autoencoder epoch");
        model.history.push(EpochLosses {
            epoch,
            reconstruction: recon,
            // With moving-average updates the codebook term carries no
            // gradient; its value equals the commitment distance.
            codebook: commit,
            commitment: commit,
            total: recon + cfg.beta * commit,
            codes_used,
        });
    }
    info!(
        epochs = cfg.epochs,
        seconds = started.elapsed().as_secs_f64(),
        final_loss = model.history.last().map(|h| h.total),
        "autoencoder trained"
    );
    Ok(model)
}

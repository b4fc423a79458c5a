use std::path::Path;

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Embedding, Linear};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GanConfig;
use crate::error::{Error, Result};
use crate::nn::{self, LstmCell, ParamStore};
use crate::seed;

const SAMPLE_BATCH: usize = 512;

/// Single-layer LSTM policy over `k` codes. Token `k` is the start symbol.
pub struct Generator {
    pub k: usize,
    pub seq_len: usize,
    pub temperature: f64,
    embedding: usize,
    hidden: usize,
    params: ParamStore,
    emb: Embedding,
    cell: LstmCell,
    out: Linear,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    k: usize,
    seq_len: usize,
    temperature: f64,
    embedding: usize,
    hidden: usize,
}

impl Generator {
    pub fn new(k: usize, seq_len: usize, cfg: &GanConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(k, seq_len, cfg.embedding, cfg.hidden, cfg.temperature, seed, dtype)
    }

    fn build(
        k: usize,
        seq_len: usize,
        embedding: usize,
        hidden: usize,
        temperature: f64,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        if k < 2 || seq_len == 0 {
            return Err(Error::Config(format!(
                "generator needs at least 2 codes and a positive length, got k={k} length={seq_len}"
            )));
        }
        let mut params = ParamStore::new(seed, dtype);
        let emb = nn::embedding(&mut params, "gen.emb", k + 1, embedding)?;
        let cell = LstmCell::new(&mut params, "gen.lstm", embedding, hidden)?;
        let out = nn::linear(&mut params, "gen.out", hidden, k)?;
        Ok(Generator {
            k,
            seq_len,
            temperature,
            embedding,
            hidden,
            params,
            emb,
            cell,
            out,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn input(&self, tokens: &[u32]) -> candle_core::Result<Tensor> {
        self.emb.forward(&nn::u32_tensor(tokens, &[tokens.len()])?)
    }

    /// Logits at every position under teacher forcing: `[batch, seq_len, k]`.
    fn teacher_logits(&self, sequences: &[Vec<usize>]) -> Result<Tensor> {
        let b = sequences.len();
        let c = self.seq_len;
        if let Some(s) = sequences.iter().find(|s| s.len() != c) {
            return Err(Error::LengthMismatch {
                left: s.len(),
                right: c,
            });
        }
        let mut tokens = Vec::with_capacity(b * c);
        for s in sequences {
            tokens.push(self.k as u32);
            tokens.extend(s[..c - 1].iter().map(|&x| x as u32));
        }
        let xs = self.emb.forward(&nn::u32_tensor(&tokens, &[b, c])?)?;
        let hs = self.cell.sequence(&xs)?;
        Ok(self.out.forward(&hs)?)
    }

    /// Log-probability of each chosen token at temperature 1: `[batch, seq_len]`.
    pub fn token_log_probs(&self, sequences: &[Vec<usize>]) -> Result<Tensor> {
        let logits = self.teacher_logits(sequences)?;
        let b = sequences.len();
        let logp = candle_nn::ops::log_softmax(&logits.reshape((b * self.seq_len, self.k))?, D::Minus1)?;
        let targets: Vec<u32> = sequences.iter().flatten().map(|&x| x as u32).collect();
        let idx = nn::u32_tensor(&targets, &[b * self.seq_len, 1])?;
        Ok(logp.gather(&idx, 1)?.reshape((b, self.seq_len))?)
    }

    /// Mean per-token negative log-likelihood.
    pub fn nll(&self, sequences: &[Vec<usize>]) -> Result<Tensor> {
        Ok(self.token_log_probs(sequences)?.mean_all()?.neg()?)
    }

    fn probs(&self, h: &Tensor) -> Result<Vec<Vec<f64>>> {
        let logits = (self.out.forward(h)? / self.temperature)?;
        Ok(nn::softmax_rows(&logits)?)
    }

    /// Next-code distribution after `prefix`, at the current temperature.
    pub fn next_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let (mut h, mut c) = self.cell.zero_state(1, self.params.dtype())?;
        for &tok in std::iter::once(&self.k).chain(prefix) {
            (h, c) = self.cell.step(&self.input(&[tok as u32])?, &h, &c)?;
        }
        Ok(self.probs(&h)?.remove(0))
    }

    /// Sample the remainder of every prefix; all prefixes must share a length.
    pub fn complete<R: Rng + ?Sized>(&self, prefixes: &[Vec<usize>], rng: &mut R) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(prefixes.len());
        for chunk in prefixes.chunks(SAMPLE_BATCH) {
            out.extend(self.complete_batch(chunk, rng)?);
        }
        Ok(out)
    }

    fn complete_batch<R: Rng + ?Sized>(&self, prefixes: &[Vec<usize>], rng: &mut R) -> Result<Vec<Vec<usize>>> {
        let b = prefixes.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let t0 = prefixes[0].len();
        if prefixes.iter().any(|p| p.len() != t0) || t0 > self.seq_len {
            return Err(Error::Data("rollout prefixes must share a length no longer than the sequence".into()));
        }
        let mut seqs: Vec<Vec<usize>> = prefixes.to_vec();
        let (mut h, mut c) = self.cell.zero_state(b, self.params.dtype())?;
        let mut last: Vec<u32> = vec![self.k as u32; b];
        for t in 0..self.seq_len {
            (h, c) = self.cell.step(&self.input(&last)?, &h, &c)?;
            if t < t0 {
                last = seqs.iter().map(|s| s[t] as u32).collect();
                continue;
            }
            let probs = self.probs(&h)?;
            for (s, p) in seqs.iter_mut().zip(&probs) {
                s.push(nn::sample_categorical(p, rng));
            }
            last = seqs.iter().map(|s| s[t] as u32).collect();
        }
        Ok(seqs)
    }

    /// `m` sequences, reproducible under `seed`.
    pub fn sample(&self, m: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        let mut rng = seed::rng(seed);
        self.complete(&vec![Vec::new(); m], &mut rng)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest {
            k: self.k,
            seq_len: self.seq_len,
            temperature: self.temperature,
            embedding: self.embedding,
            hidden: self.hidden,
        };
        crate::jsonl::write_json(&dir.join("generator.json"), &manifest)?;
        self.params.save(&dir.join("generator.safetensors"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = crate::jsonl::read_json(&dir.join("generator.json"))?;
        let gen = Self::build(m.k, m.seq_len, m.embedding, m.hidden, m.temperature, 0, DType::F32)?;
        gen.params.load(&dir.join("generator.safetensors"))?;
        Ok(gen)
    }
}

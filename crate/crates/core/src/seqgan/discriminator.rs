use std::path::Path;

use candle_core::{DType, Module, Tensor};
use candle_nn::{Embedding, Linear};
use serde::{Deserialize, Serialize};

use super::{GanConfig, SequenceScorer};
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};

/// Convolution over code embeddings with several filter widths, max-pooled
/// over time, followed by a logistic output.
pub struct Discriminator {
    pub k: usize,
    pub seq_len: usize,
    embedding: usize,
    filters: usize,
    params: ParamStore,
    emb: Embedding,
    convs: Vec<(usize, Linear)>,
    out: Linear,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    k: usize,
    seq_len: usize,
    embedding: usize,
    filters: usize,
    widths: Vec<usize>,
}

impl Discriminator {
    pub fn new(k: usize, seq_len: usize, cfg: &GanConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(k, seq_len, cfg.embedding, cfg.disc_filters, &cfg.disc_widths, seed, dtype)
    }

    fn build(
        k: usize,
        seq_len: usize,
        embedding: usize,
        filters: usize,
        widths: &[usize],
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let mut widths: Vec<usize> = widths.iter().map(|&w| w.min(seq_len)).collect();
        widths.dedup();
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config("discriminator needs positive filter widths".into()));
        }
        let mut params = ParamStore::new(seed, dtype);
        let emb = nn::embedding(&mut params, "disc.emb", k, embedding)?;
        let convs = widths
            .iter()
            .map(|&w| Ok((w, nn::linear(&mut params, &format!("disc.conv{w}"), w * embedding, filters)?)))
            .collect::<Result<_>>()?;
        let out = nn::linear(&mut params, "disc.out", filters * widths.len(), 1)?;
        Ok(Discriminator {
            k,
            seq_len,
            embedding,
            filters,
            params,
            emb,
            convs,
            out,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Real-vs-fake logit per sequence: `[batch]`.
    pub fn logits(&self, sequences: &[Vec<usize>]) -> Result<Tensor> {
        let b = sequences.len();
        let c = self.seq_len;
        if let Some(s) = sequences.iter().find(|s| s.len() != c) {
            return Err(Error::LengthMismatch {
                left: s.len(),
                right: c,
            });
        }
        if let Some(&bad) = sequences.iter().flatten().find(|&&x| x >= self.k) {
            return Err(Error::InvalidToken {
                token: bad,
                limit: self.k,
            });
        }
        let tokens: Vec<u32> = sequences.iter().flatten().map(|&x| x as u32).collect();
        let x = self.emb.forward(&nn::u32_tensor(&tokens, &[b, c])?)?;
        let mut pooled = Vec::with_capacity(self.convs.len());
        for (w, conv) in &self.convs {
            let windows = (0..=c - w)
                .map(|i| x.narrow(1, i, *w)?.reshape((b, w * self.embedding)))
                .collect::<candle_core::Result<Vec<_>>>()?;
            let unfolded = Tensor::stack(&windows, 1)?;
            pooled.push(conv.forward(&unfolded)?.relu()?.max(1)?);
        }
        let features = Tensor::cat(&pooled, 1)?;
        Ok(self.out.forward(&features)?.squeeze(1)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest {
            k: self.k,
            seq_len: self.seq_len,
            embedding: self.embedding,
            filters: self.filters,
            widths: self.convs.iter().map(|(w, _)| *w).collect(),
        };
        crate::jsonl::write_json(&dir.join("discriminator.json"), &manifest)?;
        self.params.save(&dir.join("discriminator.safetensors"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = crate::jsonl::read_json(&dir.join("discriminator.json"))?;
        let d = Self::build(m.k, m.seq_len, m.embedding, m.filters, &m.widths, 0, DType::F32)?;
        d.params.load(&dir.join("discriminator.safetensors"))?;
        Ok(d)
    }
}

impl SequenceScorer for Discriminator {
    fn score(&self, sequences: &[Vec<usize>]) -> Result<Vec<f64>> {
        if sequences.is_empty() {
            return Ok(Vec::new());
        }
        let p = candle_nn::ops::sigmoid(&self.logits(sequences)?)?;
        Ok(p.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}

//! Small neural building blocks on top of candle.
//!
//! Every parameter is drawn from a seeded ChaCha stream, so two models built
//! with the same seed are bit-identical. Parameters are kept in insertion
//! order, which keeps optimizer state and checkpoints deterministic.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{AdamW, Embedding, Linear, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;

pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    vars: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            dtype,
            device: Device::Cpu,
            rng: seed::rng(seed),
            vars: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.push((name.to_string(), var));
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, data, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Copies of every parameter, for restoring later with [`ParamStore::restore`].
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        Ok(self
            .vars
            .iter()
            .map(|(_, v)| v.as_tensor().copy())
            .collect::<candle_core::Result<_>>()?)
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.vars.len() {
            return Err(Error::Data("snapshot does not match parameter set".into()));
        }
        for ((_, v), t) in self.vars.iter().zip(snapshot) {
            v.set(t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrite parameters in place from a file written by [`ParamStore::save`].
    pub fn load(&self, path: &Path) -> Result<()> {
        let mut map = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in &self.vars {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::Data(format!("{}: missing weight {name}", path.display())))?;
            if t.dims() != var.dims() {
                return Err(Error::Data(format!(
                    "{}: weight {name} has shape {:?}, expected {:?}",
                    path.display(),
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub fn linear(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Linear> {
    let bound = 1.0 / (input as f64).sqrt();
    let w = ps.uniform(&format!("{name}.weight"), &[output, input], bound)?;
    let b = ps.uniform(&format!("{name}.bias"), &[output], bound)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn linear_no_bias(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Linear> {
    let bound = 1.0 / (input as f64).sqrt();
    let w = ps.uniform(&format!("{name}.weight"), &[output, input], bound)?;
    Ok(Linear::new(w, None))
}

pub fn embedding(ps: &mut ParamStore, name: &str, count: usize, dim: usize) -> Result<Embedding> {
    let w = ps.normal(&format!("{name}.weight"), &[count, dim], 1.0)?;
    Ok(Embedding::new(w, dim))
}

pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: ps.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        candle_nn::ops::layer_norm_slow(x, &self.gamma, &self.beta, 1e-5)
    }
}

pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: linear(ps, &format!("{name}.q"), dim, dim)?,
            k: linear(ps, &format!("{name}.k"), dim, dim)?,
            v: linear(ps, &format!("{name}.v"), dim, dim)?,
            o: linear(ps, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }
}

impl Module for MultiHeadAttention {
    /// `x`: `[batch, time, dim]`, attention over all positions.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let split = |y: Tensor| -> candle_core::Result<Tensor> {
            y.reshape((b, t, self.heads, hd))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        self.o.forward(&out)
    }
}

/// Pre-norm transformer layer with a ReLU feed-forward block of width `4 * dim`.
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(TransformerLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            ff1: linear(ps, &format!("{name}.ff1"), dim, 4 * dim)?,
            ff2: linear(ps, &format!("{name}.ff2"), 4 * dim, dim)?,
        })
    }
}

impl Module for TransformerLayer {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.ff1.forward(&self.ln2.forward(&x)?)?.relu()?;
        &x + self.ff2.forward(&h)?
    }
}

pub struct LstmCell {
    input: Linear,
    hidden: Linear,
    pub hidden_size: usize,
}

impl LstmCell {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(LstmCell {
            input: linear(ps, &format!("{name}.input"), input, 4 * hidden)?,
            hidden: linear_no_bias(ps, &format!("{name}.hidden"), hidden, 4 * hidden)?,
            hidden_size: hidden,
        })
    }

    pub fn zero_state(&self, batch: usize, dtype: DType) -> candle_core::Result<(Tensor, Tensor)> {
        let h = Tensor::zeros((batch, self.hidden_size), dtype, &Device::Cpu)?;
        Ok((h.clone(), h))
    }

    /// One step. `x`: `[batch, input]`; state tensors `[batch, hidden]`.
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let gates = (self.input.forward(x)? + self.hidden.forward(h)?)?;
        let chunks = gates.chunk(4, 1)?;
        let i = candle_nn::ops::sigmoid(&chunks[0])?;
        let f = candle_nn::ops::sigmoid(&chunks[1])?;
        let g = chunks[2].tanh()?;
        let o = candle_nn::ops::sigmoid(&chunks[3])?;
        let c = ((f * c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok((h, c))
    }

    /// Run over `[batch, time, input]`, returning every hidden state `[batch, time, hidden]`.
    pub fn sequence(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, _) = xs.dims3()?;
        let (mut h, mut c) = self.zero_state(b, xs.dtype())?;
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let x = xs.narrow(1, step, 1)?.squeeze(1)?;
            (h, c) = self.step(&x, &h, &c)?;
            outs.push(h.clone());
        }
        Tensor::stack(&outs, 1)
    }
}

/// Adam without weight decay.
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?)
}

/// Mean binary cross-entropy on logits, computed as
/// `max(x, 0) - x t + ln(1 + e^{-|x|})` to stay finite for large logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> candle_core::Result<Tensor> {
    let pos = logits.relu()?;
    let soft = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    ((pos - (logits * targets)?)? + soft)?.mean_all()
}

/// Mean categorical cross-entropy; `logits` is `[n, classes]`, `targets` is `[n]` u32.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::loss::cross_entropy(logits, targets)
}

pub fn u32_tensor(values: &[u32], shape: &[usize]) -> candle_core::Result<Tensor> {
    Tensor::from_slice(values, shape, &Device::Cpu)
}

/// Rows of a `[n, classes]` float tensor as `f64` probability vectors.
pub fn softmax_rows(logits: &Tensor) -> candle_core::Result<Vec<Vec<f64>>> {
    candle_nn::ops::softmax(logits, D::Minus1)?
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let build = |s| {
            let mut ps = ParamStore::new(s, DType::F32);
            let l = linear(&mut ps, "l", 3, 2).unwrap();
            l.weight().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new(0, DType::F32);
        ps.constant("a", &[1], 0.0).unwrap();
        assert!(ps.constant("a", &[1], 0.0).is_err());
    }

    #[test]
    fn bce_matches_direct_formula() {
        let x = Tensor::new(&[-3.0f64, 0.0, 2.0], &Device::Cpu).unwrap();
        let t = Tensor::new(&[0.0f64, 1.0, 1.0], &Device::Cpu).unwrap();
        let got = scalar(&bce_with_logits(&x, &t).unwrap()).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let want = -((1.0 - sig(-3.0)).ln() + sig(0.0).ln() + sig(2.0).ln()) / 3.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let mut a = ParamStore::new(1, DType::F32);
        linear(&mut a, "l", 4, 4).unwrap();
        a.save(&path).unwrap();
        let mut b = ParamStore::new(2, DType::F32);
        let lb = linear(&mut b, "l", 4, 4).unwrap();
        b.load(&path).unwrap();
        let wa = a.named()[0].1.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let wb = lb.weight().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn categorical_sampling_and_argmax() {
        let mut rng = seed::rng(0);
        for _ in 0..100 {
            assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], &mut rng), 1);
        }
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn lstm_and_attention_shapes() {
        let mut ps = ParamStore::new(0, DType::F32);
        let cell = LstmCell::new(&mut ps, "c", 3, 5).unwrap();
        let xs = Tensor::zeros((2, 4, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(cell.sequence(&xs).unwrap().dims(), &[2, 4, 5]);
        let layer = TransformerLayer::new(&mut ps, "t", 8, 2).unwrap();
        let x = Tensor::ones((2, 4, 8), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(layer.forward(&x).unwrap().dims(), &[2, 4, 8]);
    }
}

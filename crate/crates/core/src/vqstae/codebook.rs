use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K` vectors of width `D`, stored row-major, plus the moving-average state
/// used to update them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub k: usize,
    pub d: usize,
    pub vectors: Vec<f64>,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
}

/// Nearest row by squared Euclidean distance; ties go to the lowest index.
pub fn quantize(vectors: &[f64], d: usize, z: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, row) in vectors.chunks_exact(d).enumerate() {
        let dist: f64 = row.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    (best, best_dist)
}

impl Codebook {
    pub fn from_vectors(k: usize, d: usize, vectors: Vec<f64>) -> Result<Self> {
        if k < 2 || d < 1 || vectors.len() != k * d {
            return Err(Error::Config(format!(
                "codebook needs K >= 2, D >= 1 and K*D values, got K={k} D={d} with {} values",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("codebook vectors must be finite".into()));
        }
        Ok(Codebook {
            k,
            d,
            ema_counts: vec![1.0; k],
            ema_sums: vectors.clone(),
            vectors,
        })
    }

    /// Seed the entries from distinct rows of `latents` (`n x d`, row-major),
    /// reusing rows only when `n < k`.
    pub fn from_latents<R: Rng + ?Sized>(k: usize, d: usize, latents: &[f64], rng: &mut R) -> Result<Self> {
        let n = latents.len() / d;
        if n == 0 {
            return Err(Error::Data("no encoder outputs to seed the codebook".into()));
        }
        let picks: Vec<usize> = if n >= k {
            sample(rng, n, k).into_vec()
        } else {
            (0..k).map(|i| if i < n { i } else { rng.random_range(0..n) }).collect()
        };
        let vectors = picks
            .iter()
            .flat_map(|&i| latents[i * d..(i + 1) * d].iter().copied())
            .collect();
        Self::from_vectors(k, d, vectors)
    }

    pub fn row(&self, code: usize) -> &[f64] {
        &self.vectors[code * self.d..(code + 1) * self.d]
    }

    pub fn quantize(&self, z: &[f64]) -> usize {
        quantize(&self.vectors, self.d, z).0
    }

    /// Moving-average update from one batch of latents and their codes.
    pub fn ema_update(&mut self, latents: &[f64], codes: &[usize], decay: f64) {
        const EPS: f64 = 1e-5;
        let mut counts = vec![0.0; self.k];
        let mut sums = vec![0.0; self.k * self.d];
        for (z, &c) in latents.chunks_exact(self.d).zip(codes) {
            counts[c] += 1.0;
            for (s, v) in sums[c * self.d..(c + 1) * self.d].iter_mut().zip(z) {
                *s += v;
            }
        }
        for (e, n) in self.ema_counts.iter_mut().zip(&counts) {
            *e = decay * *e + (1.0 - decay) * n;
        }
        for (e, s) in self.ema_sums.iter_mut().zip(&sums) {
            *e = decay * *e + (1.0 - decay) * s;
        }
        // Laplace smoothing keeps rarely used entries from dividing by ~0.
        let total: f64 = self.ema_counts.iter().sum();
        for c in 0..self.k {
            let smoothed = (self.ema_counts[c] + EPS) / (total + self.k as f64 * EPS) * total;
            for j in 0..self.d {
                self.vectors[c * self.d + j] = self.ema_sums[c * self.d + j] / smoothed;
            }
        }
    }

    /// Move each entry flagged in `dead` onto a random latent row.
    pub fn reseed<R: Rng + ?Sized>(&mut self, dead: &[bool], latents: &[f64], rng: &mut R) -> usize {
        let n = latents.len() / self.d;
        if n == 0 {
            return 0;
        }
        let mut moved = 0;
        for (c, _) in dead.iter().enumerate().filter(|(_, &is_dead)| is_dead) {
            let r = rng.random_range(0..n);
            let row = &latents[r * self.d..(r + 1) * self.d];
            self.vectors[c * self.d..(c + 1) * self.d].copy_from_slice(row);
            self.ema_sums[c * self.d..(c + 1) * self.d].copy_from_slice(row);
            self.ema_counts[c] = 1.0;
            moved += 1;
        }
        moved
    }
}

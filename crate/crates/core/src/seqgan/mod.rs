//! Adversarial generation of code sequences.
//!
//! A recurrent generator is pretrained by maximum likelihood, then refined
//! with REINFORCE against a convolutional discriminator whose per-step reward
//! is estimated by Monte-Carlo completion of each prefix.

mod discriminator;
mod generator;

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

pub use discriminator::Discriminator;
pub use generator::Generator;

use crate::error::{Error, Result};
use crate::nn;
use crate::seed;

/// Anything that scores complete sequences with a probability of being real.
pub trait SequenceScorer {
    fn score(&self, sequences: &[Vec<usize>]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub embedding: usize,
    pub hidden: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub disc_pretrain_steps: usize,
    pub rounds: usize,
    pub rollouts: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub disc_steps: usize,
    pub batch_size: usize,
    pub disc_filters: usize,
    pub disc_widths: Vec<usize>,
    /// Minimum distinct-sequence ratio of an accepted sample batch.
    pub variety_threshold: f64,
    pub temperature: f64,
    pub temperature_step: f64,
    pub resample_attempts: usize,
    pub max_restarts: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            embedding: 32,
            hidden: 32,
            pretrain_epochs: 60,
            pretrain_lr: 1e-2,
            disc_pretrain_steps: 20,
            rounds: 5,
            rollouts: 16,
            generator_lr: 1e-3,
            discriminator_lr: 1e-3,
            disc_steps: 3,
            batch_size: 32,
            disc_filters: 32,
            disc_widths: vec![2, 3, 4, 5],
            variety_threshold: 0.3,
            temperature: 1.0,
            temperature_step: 0.2,
            resample_attempts: 3,
            max_restarts: 2,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embedding", self.embedding),
            ("hidden", self.hidden),
            ("rollouts", self.rollouts),
            ("disc_steps", self.disc_steps),
            ("batch_size", self.batch_size),
            ("disc_filters", self.disc_filters),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !(self.variety_threshold > 0.0 && self.variety_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "variety threshold must lie in (0, 1], got {}",
                self.variety_threshold
            )));
        }
        if self.temperature <= 0.0 || self.disc_widths.is_empty() || self.disc_widths.contains(&0) {
            return Err(Error::Config(
                "temperature must be positive and discriminator widths non-empty and >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn check_corpus(real: &[Vec<usize>], k: usize) -> Result<usize> {
    let c = real
        .first()
        .ok_or_else(|| Error::Data("no real code sequences".into()))?
        .len();
    if c == 0 || real.iter().any(|s| s.len() != c) {
        return Err(Error::Data("real code sequences must share one non-zero length".into()));
    }
    if let Some(&bad) = real.iter().flatten().find(|&&x| x >= k) {
        return Err(Error::InvalidToken { token: bad, limit: k });
    }
    Ok(c)
}

/// Maximum-likelihood pretraining; returns the mean negative log-likelihood
/// of every epoch.
pub fn pretrain(gen: &mut Generator, real: &[Vec<usize>], cfg: &GanConfig, seed: u64) -> Result<Vec<f64>> {
    check_corpus(real, gen.k)?;
    let mut opt = nn::adam(gen.params().vars(), cfg.pretrain_lr)?;
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..real.len()).collect();
    let mut curve = Vec::with_capacity(cfg.pretrain_epochs);
    for _ in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<usize>> = idx.iter().map(|&i| real[i].clone()).collect();
            let loss = gen.nll(&batch)?;
            opt.backward_step(&loss)?;
            sum += nn::scalar(&loss)? * batch.len() as f64;
            n += batch.len();
        }
        curve.push(sum / n as f64);
    }
    Ok(curve)
}

/// Expected discriminator score of completions of `prefix`.
pub fn rollout_reward<S: SequenceScorer + ?Sized, R: Rng + ?Sized>(
    gen: &Generator,
    disc: &S,
    prefix: &[usize],
    rollouts: usize,
    rng: &mut R,
) -> Result<f64> {
    if prefix.len() == gen.seq_len {
        return Ok(disc.score(&[prefix.to_vec()])?[0]);
    }
    let prefixes = vec![prefix.to_vec(); rollouts.max(1)];
    let done = gen.complete(&prefixes, rng)?;
    let scores = disc.score(&done)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Per-step rewards `Q[b][t]` for each sequence: rollouts from every proper
/// prefix, the discriminator score itself at the final step.
pub fn step_rewards<S: SequenceScorer + ?Sized, R: Rng + ?Sized>(
    gen: &Generator,
    disc: &S,
    sequences: &[Vec<usize>],
    rollouts: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let c = gen.seq_len;
    let rollouts = rollouts.max(1);
    let mut rewards = vec![vec![0.0; c]; sequences.len()];
    for t in 1..c {
        let prefixes: Vec<Vec<usize>> = sequences
            .iter()
            .flat_map(|s| std::iter::repeat_n(s[..t].to_vec(), rollouts))
            .collect();
        let done = gen.complete(&prefixes, rng)?;
        let scores = disc.score(&done)?;
        for (b, chunk) in scores.chunks(rollouts).enumerate() {
            rewards[b][t - 1] = chunk.iter().sum::<f64>() / rollouts as f64;
        }
    }
    for (b, s) in disc.score(sequences)?.into_iter().enumerate() {
        rewards[b][c - 1] = s;
    }
    Ok(rewards)
}

/// REINFORCE surrogate `-(1/B) sum_b sum_t Q[b][t] log pi(x_bt | x_b,<t)`.
pub fn policy_gradient_loss(gen: &Generator, sequences: &[Vec<usize>], rewards: &[Vec<f64>]) -> Result<Tensor> {
    let logp = gen.token_log_probs(sequences)?;
    let q: Vec<f64> = rewards.iter().flatten().copied().collect();
    let q = Tensor::from_vec(q, logp.dims(), gen.params().device())?.to_dtype(logp.dtype())?;
    Ok(((logp * q)?.sum_all()? / -(sequences.len() as f64))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub disc_accuracy: f64,
    pub mean_reward: f64,
    pub nll: f64,
}

pub fn train_discriminator_step(
    disc: &Discriminator,
    opt: &mut candle_nn::AdamW,
    real: &[Vec<usize>],
    fake: &[Vec<usize>],
) -> Result<(f64, f64)> {
    let mut seqs = real.to_vec();
    seqs.extend_from_slice(fake);
    let labels: Vec<f64> = std::iter::repeat_n(1.0, real.len())
        .chain(std::iter::repeat_n(0.0, fake.len()))
        .collect();
    let logits = disc.logits(&seqs)?;
    let target = Tensor::from_vec(labels.clone(), logits.dims(), disc.params().device())?
        .to_dtype(logits.dtype())?;
    let loss = nn::bce_with_logits(&logits, &target)?;
    opt.backward_step(&loss)?;
    let scores = logits.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let correct = scores
        .iter()
        .zip(&labels)
        .filter(|(s, l)| (**s > 0.0) == (**l > 0.5))
        .count();
    Ok((nn::scalar(&loss)?, correct as f64 / labels.len() as f64))
}

fn draw<R: Rng + ?Sized>(real: &[Vec<usize>], n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..n).map(|_| real[rng.random_range(0..real.len())].clone()).collect()
}

/// Train the discriminator alone against the current generator.
pub fn pretrain_discriminator(
    gen: &Generator,
    disc: &Discriminator,
    real: &[Vec<usize>],
    cfg: &GanConfig,
    seed: u64,
) -> Result<f64> {
    let mut opt = nn::adam(disc.params().vars(), cfg.discriminator_lr)?;
    let mut rng = seed::rng(seed);
    let mut acc = 0.5;
    for _ in 0..cfg.disc_pretrain_steps {
        let fake = gen.complete(&vec![Vec::new(); cfg.batch_size], &mut rng)?;
        let batch = draw(real, cfg.batch_size, &mut rng);
        acc = train_discriminator_step(disc, &mut opt, &batch, &fake)?.1;
    }
    Ok(acc)
}

/// Alternate generator policy-gradient steps with discriminator steps for
/// `cfg.rounds` rounds.
pub fn adversarial_train(
    gen: &mut Generator,
    disc: &Discriminator,
    real: &[Vec<usize>],
    cfg: &GanConfig,
    seed: u64,
) -> Result<Vec<RoundStats>> {
    check_corpus(real, gen.k)?;
    let mut rng = seed::rng(seed);
    let mut g_opt = nn::adam(gen.params().vars(), cfg.generator_lr)?;
    let mut d_opt = nn::adam(disc.params().vars(), cfg.discriminator_lr)?;
    let mut stats = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let samples = gen.complete(&vec![Vec::new(); cfg.batch_size], &mut rng)?;
        let rewards = step_rewards(gen, disc, &samples, cfg.rollouts, &mut rng)?;
        let loss = policy_gradient_loss(gen, &samples, &rewards)?;
        g_opt.backward_step(&loss)?;
        let mean_reward = rewards.iter().flatten().sum::<f64>() / (samples.len() * gen.seq_len) as f64;

        let mut acc = 0.0;
        for _ in 0..cfg.disc_steps {
            let fake = gen.complete(&vec![Vec::new(); cfg.batch_size], &mut rng)?;
            let batch = draw(real, cfg.batch_size, &mut rng);
            acc = train_discriminator_step(disc, &mut d_opt, &batch, &fake)?.1;
        }
        let nll = nn::scalar(&gen.nll(&draw(real, cfg.batch_size, &mut rng))?)?;
        debug!(round, acc, mean_reward, nll, "adversarial round");
        stats.push(RoundStats {
            round,
            disc_accuracy: acc,
            mean_reward,
            nll,
        });
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarietyReport {
    pub passed: bool,
    pub distinct_ratio: f64,
    pub modal_share: f64,
}

/// Pass iff the distinct-sequence ratio is at least `threshold`.
pub fn variety_check(samples: &[Vec<usize>], threshold: f64) -> VarietyReport {
    let mut counts: std::collections::BTreeMap<&[usize], usize> = std::collections::BTreeMap::new();
    for s in samples {
        *counts.entry(s.as_slice()).or_default() += 1;
    }
    let n = samples.len().max(1) as f64;
    let distinct_ratio = counts.len() as f64 / n;
    let modal_share = counts.values().copied().max().unwrap_or(0) as f64 / n;
    VarietyReport {
        passed: distinct_ratio >= threshold,
        distinct_ratio,
        modal_share,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAttempt {
    pub restart: usize,
    pub temperature: f64,
    pub report: VarietyReport,
}

/// Everything produced by a full generation run.
pub struct GanRun {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub pretrain_nll: Vec<f64>,
    pub rounds: Vec<RoundStats>,
    pub samples: Vec<Vec<usize>>,
    pub attempts: Vec<SampleAttempt>,
}

/// Pretrain, train adversarially and sample `m` sequences that pass the
/// variety check.
///
/// A failing batch is resampled at raised temperatures; if that does not
/// help, adversarial training restarts from the pretrained weights under a
/// fresh seed. Exhausting every restart is an error, never a silent output.
pub fn train_and_sample(real: &[Vec<usize>], k: usize, cfg: &GanConfig, m: usize, seed: u64) -> Result<GanRun> {
    cfg.validate()?;
    let c = check_corpus(real, k)?;
    let mut gen = Generator::new(k, c, cfg, seed::derive(seed, "seqgan.generator"), DType::F32)?;
    let pretrain_nll = pretrain(&mut gen, real, cfg, seed::derive(seed, "seqgan.pretrain"))?;
    let checkpoint = gen.params().snapshot()?;
    let mut attempts = Vec::new();
    let mut last_ratio = 0.0;
    for restart in 0..=cfg.max_restarts {
        let run_seed = seed::derive(seed, &format!("seqgan.restart{restart}"));
        gen.params().restore(&checkpoint)?;
        let disc = Discriminator::new(k, c, cfg, seed::derive(run_seed, "disc"), DType::F32)?;
        pretrain_discriminator(&gen, &disc, real, cfg, seed::derive(run_seed, "disc.pretrain"))?;
        let rounds = adversarial_train(&mut gen, &disc, real, cfg, seed::derive(run_seed, "adversarial"))?;
        for attempt in 0..=cfg.resample_attempts {
            gen.temperature = cfg.temperature + cfg.temperature_step * attempt as f64;
            let samples = gen.sample(m, seed::derive(run_seed, &format!("sample{attempt}")))?;
            let report = variety_check(&samples, cfg.variety_threshold);
            last_ratio = report.distinct_ratio;
            attempts.push(SampleAttempt {
                restart,
                temperature: gen.temperature,
                report: report.clone(),
            });
            if report.passed || m == 0 {
                info!(restart, temperature = gen.temperature, ratio = report.distinct_ratio, "samples accepted");
                return Ok(GanRun {
                    generator: gen,
                    discriminator: disc,
                    pretrain_nll,
                    rounds,
                    samples,
                    attempts,
                });
            }
            warn!(restart, temperature = gen.temperature, ratio = report.distinct_ratio, "low variety");
        }
    }
    Err(Error::LowVariety {
        ratio: last_ratio,
        threshold: cfg.variety_threshold,
    })
}

/// Training curves as CSV: one row per pretraining epoch, then one per round.
pub fn write_curves(path: &Path, pretrain_nll: &[f64], rounds: &[RoundStats]) -> Result<()> {
    let mut out = String::from("phase,step,disc_accuracy,mean_reward,nll\n");
    for (i, nll) in pretrain_nll.iter().enumerate() {
        out.push_str(&format!("pretrain,{i},,,{nll}\n"));
    }
    for r in rounds {
        out.push_str(&format!(
            "adversarial,{},{},{},{}\n",
            r.round, r.disc_accuracy, r.mean_reward, r.nll
        ));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

use candle_core::{DType, Tensor};
use iotflow_core::seqgan::{
    adversarial_train, policy_gradient_loss, pretrain, rollout_reward, step_rewards, train_and_sample,
    variety_check, Discriminator, GanConfig, Generator, SequenceScorer,
};
use iotflow_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Table(fn(&[usize]) -> f64);

impl SequenceScorer for Table {
    fn score(&self, sequences: &[Vec<usize>]) -> Result<Vec<f64>> {
        Ok(sequences.iter().map(|s| (self.0)(s)).collect())
    }
}

fn toy_table(s: &[usize]) -> f64 {
    [[0.9, 0.1], [0.4, 0.7]][s[0]][s[1]]
}

fn pattern_corpus(n: usize, c: usize) -> Vec<Vec<usize>> {
    vec![(0..c).map(|i| i % 2).collect(); n]
}

fn tiny_cfg() -> GanConfig {
    GanConfig { embedding: 4, hidden: 4, ..GanConfig::default() }
}

#[test]
fn pretraining_learns_a_repeating_pattern() {
    let cfg = GanConfig::default();
    let real = pattern_corpus(64, 8);
    let mut gen = Generator::new(4, 8, &cfg, 1, DType::F32).unwrap();
    let nll = pretrain(&mut gen, &real, &cfg, 2).unwrap();
    assert!(nll.last().unwrap() <= nll.first().unwrap());
    let samples = gen.sample(100, 3).unwrap();
    let hits = samples.iter().flatten().zip(real[0].iter().cycle()).filter(|(a, b)| a == b).count();
    assert!(hits as f64 / 800.0 >= 0.95, "{hits}/800");

    // Identical real and generated batches leave the discriminator at chance.
    let disc = Discriminator::new(4, 8, &cfg, 4, DType::F32).unwrap();
    adversarial_train(&mut gen, &disc, &real, &GanConfig { rounds: 3, ..cfg.clone() }, 5).unwrap();
    let held_real = pattern_corpus(50, 8);
    let fake = gen.sample(50, 6).unwrap();
    let logits = |s: &[Vec<usize>]| disc.logits(s).unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
    let correct = logits(&held_real).iter().filter(|&&l| l > 0.0).count() + logits(&fake).iter().filter(|&&l| l <= 0.0).count();
    let acc = correct as f64 / 100.0;
    assert!((0.35..=0.65).contains(&acc), "discriminator accuracy {acc}");
}

#[test]
fn empty_corpus_and_zero_rounds() {
    let cfg = GanConfig { rounds: 0, ..tiny_cfg() };
    let mut gen = Generator::new(3, 4, &cfg, 1, DType::F32).unwrap();
    assert!(matches!(pretrain(&mut gen, &[], &cfg, 0), Err(Error::Data(_))));
    let real = vec![vec![0, 1, 2, 0]; 8];
    let disc = Discriminator::new(3, 4, &cfg, 1, DType::F32).unwrap();
    let before = gen.params().snapshot().unwrap();
    let stats = adversarial_train(&mut gen, &disc, &real, &cfg, 0).unwrap();
    assert!(stats.is_empty());
    for (a, b) in before.iter().zip(gen.params().snapshot().unwrap()) {
        let diff = (a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }
}

#[test]
fn sampling_contract() {
    let gen = Generator::new(5, 6, &tiny_cfg(), 9, DType::F32).unwrap();
    let a = gen.sample(100, 4).unwrap();
    assert_eq!(a.len(), 100);
    assert!(a.iter().all(|s| s.len() == 6 && s.iter().all(|&c| c < 5)));
    assert_eq!(a, gen.sample(100, 4).unwrap());
    assert!(gen.sample(0, 4).unwrap().is_empty());
    for prefix in [vec![], vec![2], vec![2, 4, 0]] {
        let p = gen.next_probs(&prefix).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn final_step_reward_is_the_score() {
    let gen = Generator::new(2, 2, &tiny_cfg(), 1, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in [[0, 0], [0, 1], [1, 0], [1, 1]] {
        assert_eq!(rollout_reward(&gen, &Table(toy_table), &s, 16, &mut rng).unwrap(), toy_table(&s));
    }
    for prefix in [vec![], vec![1]] {
        for n in [1, 5, 40] {
            let r = rollout_reward(&gen, &Table(|_| 0.7), &prefix, n, &mut rng).unwrap();
            assert!((r - 0.7).abs() < 1e-12);
        }
    }
    let mut a = ChaCha8Rng::seed_from_u64(5);
    let mut b = ChaCha8Rng::seed_from_u64(5);
    assert_eq!(
        rollout_reward(&gen, &Table(toy_table), &[1], 8, &mut a).unwrap(),
        rollout_reward(&gen, &Table(toy_table), &[1], 8, &mut b).unwrap()
    );
}

fn analytic_reward(gen: &Generator, prefix: &[usize]) -> f64 {
    match prefix.len() {
        2 => toy_table(prefix),
        1 => gen.next_probs(prefix).unwrap().iter().enumerate().map(|(x, p)| p * toy_table(&[prefix[0], x])).sum(),
        _ => gen.next_probs(&[]).unwrap().iter().enumerate().map(|(x, p)| p * analytic_reward(gen, &[x])).sum(),
    }
}

#[test]
fn rollout_error_and_variance_shrink() {
    let gen = Generator::new(2, 2, &tiny_cfg(), 3, DType::F64).unwrap();
    for prefix in [vec![], vec![0], vec![1]] {
        let truth = analytic_reward(&gen, &prefix);
        let mut errors = Vec::new();
        let mut variances = Vec::new();
        for n in [1, 4, 16, 64] {
            let draws: Vec<f64> = (0..100)
                .map(|trial| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 * n as u64 + trial);
                    rollout_reward(&gen, &Table(toy_table), &prefix, n, &mut rng).unwrap()
                })
                .collect();
            errors.push(draws.iter().map(|r| (r - truth).abs()).sum::<f64>() / 100.0);
            variances.push(draws.iter().map(|r| (r - truth).powi(2)).sum::<f64>() / 100.0);
        }
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{prefix:?}: {errors:?}");
        // Mean squared error ~ 1/N: a 64-fold budget cuts it by well over 16.
        assert!(variances[0] / variances[3] > 16.0, "{variances:?}");
    }
}

fn flat_grads(gen: &Generator, loss: &Tensor) -> Vec<f64> {
    let grads = loss.backward().unwrap();
    gen.params()
        .vars()
        .iter()
        .flat_map(|v| match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; v.as_tensor().elem_count()],
        })
        .collect()
}

fn peaked_table(s: &[usize]) -> f64 {
    if s == [0, 0] {
        0.9
    } else {
        0.1
    }
}

/// Gradient of the exact expected reward over all four sequences against the
/// REINFORCE estimate from 10k sampled sequences. The reward has one clear
/// optimum so the true gradient stands well above the sampling noise, which
/// carries no baseline.
#[test]
fn policy_gradient_matches_enumeration() {
    for init in [7, 8, 9] {
        let gen = Generator::new(2, 2, &tiny_cfg(), init, DType::F64).unwrap();
        let all = vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]];
        let log_p = gen.token_log_probs(&all).unwrap().sum(1).unwrap();
        let d = Tensor::new(&[0.9, 0.1, 0.1, 0.1], gen.params().device()).unwrap();
        let expected = (log_p.exp().unwrap() * d).unwrap().sum_all().unwrap();
        let analytic = flat_grads(&gen, &expected);

        let mut rng = ChaCha8Rng::seed_from_u64(init + 4);
        let samples = gen.complete(&vec![Vec::new(); 10_000], &mut rng).unwrap();
        let rewards = step_rewards(&gen, &Table(peaked_table), &samples, 16, &mut rng).unwrap();
        let loss = policy_gradient_loss(&gen, &samples, &rewards).unwrap();
        let estimate: Vec<f64> = flat_grads(&gen, &loss).into_iter().map(|g| -g).collect();

        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&estimate).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&analytic);
        assert!(rel <= 0.1, "init {init}: relative error {rel}");
    }
}

#[test]
fn low_variety_is_never_emitted() {
    let cfg = GanConfig {
        variety_threshold: 1.0,
        rounds: 1,
        max_restarts: 1,
        pretrain_epochs: 30,
        ..tiny_cfg()
    };
    match train_and_sample(&pattern_corpus(32, 6), 2, &cfg, 64, 0) {
        Err(Error::LowVariety { threshold, .. }) => assert_eq!(threshold, 1.0),
        Ok(run) => {
            let (last, earlier) = run.attempts.split_last().unwrap();
            assert!(last.report.passed && earlier.iter().all(|a| !a.report.passed));
            assert_eq!(variety_check(&run.samples, 1.0).distinct_ratio, 1.0);
        }
        Err(e) => panic!("{e}"),
    }
    let report = variety_check(&vec![vec![1, 2]; 100], 0.1);
    assert!(!report.passed && (report.distinct_ratio - 0.01).abs() < 1e-12);
}


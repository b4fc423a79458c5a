//! Inter-packet durations binned into magnitude partitions.
//!
//! Durations are floored, moved to log10 space and clustered with exact
//! 1-D k-means. A partition id stands in for the duration everywhere downstream;
//! concrete values are recovered by sampling a stored member and jittering it
//! by up to a tenth of its value.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationModel {
    pub k: usize,
    /// Ascending partition centers, in log10 seconds.
    pub centroids: Vec<f64>,
    /// Floored training durations per partition, in seconds.
    pub members: Vec<Vec<f64>>,
    pub epsilon_floor: f64,
}

fn nearest(centroids: &[f64], x: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in centroids.iter().enumerate() {
        let d = (x - c).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Weighted sums over prefixes of sorted values, for O(1) segment costs.
struct Prefix {
    w: Vec<f64>,
    wx: Vec<f64>,
    wxx: Vec<f64>,
}

impl Prefix {
    fn new(points: &[(f64, f64)]) -> Self {
        let mut p = Prefix { w: vec![0.0], wx: vec![0.0], wxx: vec![0.0] };
        for &(x, w) in points {
            p.w.push(p.w.last().unwrap() + w);
            p.wx.push(p.wx.last().unwrap() + w * x);
            p.wxx.push(p.wxx.last().unwrap() + w * x * x);
        }
        p
    }

    /// Within-segment sum of squares of `points[i..j]`.
    fn cost(&self, i: usize, j: usize) -> f64 {
        let w = self.w[j] - self.w[i];
        let wx = self.wx[j] - self.wx[i];
        ((self.wxx[j] - self.wxx[i]) - wx * wx / w).max(0.0)
    }

    fn mean(&self, i: usize, j: usize) -> f64 {
        (self.wx[j] - self.wx[i]) / (self.w[j] - self.w[i])
    }
}

/// Globally optimal 1-D k-means over sorted, distinct `(value, weight)`
/// points with `k <= points.len()`; returns ascending centroids.
///
/// Segment costs satisfy the quadrangle inequality, so the optimal split
/// points are monotone and each layer is filled by divide and conquer.
fn optimal_centroids(points: &[(f64, f64)], k: usize) -> Vec<f64> {
    let n = points.len();
    let pre = Prefix::new(points);
    // best[c][j]: cost of the first j points in c segments; cut[c][j]: start of the last one.
    let mut best = vec![vec![f64::INFINITY; n + 1]; k + 1];
    let mut cut = vec![vec![0usize; n + 1]; k + 1];
    best[0][0] = 0.0;
    #[allow(clippy::too_many_arguments)]
    fn fill(
        lo: usize,
        hi: usize,
        opt_lo: usize,
        opt_hi: usize,
        pre: &Prefix,
        prev: &[f64],
        best: &mut [f64],
        cut: &mut [usize],
    ) {
        if lo > hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let (mut arg, mut val) = (opt_lo, f64::INFINITY);
        for i in opt_lo..=opt_hi.min(mid - 1) {
            let v = prev[i] + pre.cost(i, mid);
            if v < val {
                val = v;
                arg = i;
            }
        }
        best[mid] = val;
        cut[mid] = arg;
        if mid > lo {
            fill(lo, mid - 1, opt_lo, arg, pre, prev, best, cut);
        }
        fill(mid + 1, hi, arg, opt_hi, pre, prev, best, cut);
    }
    for c in 1..=k {
        let prev = best[c - 1].clone();
        fill(c, n, c - 1, n - 1, &pre, &prev, &mut best[c], &mut cut[c]);
    }
    let mut centroids = Vec::with_capacity(k);
    let mut j = n;
    for c in (1..=k).rev() {
        let i = cut[c][j];
        centroids.push(pre.mean(i, j));
        j = i;
    }
    centroids.reverse();
    centroids
}

pub fn fit_duration_partitions(durations: &[f64], k: usize) -> Result<DurationModel> {
    fit_with_floor(durations, k, DEFAULT_EPSILON_FLOOR)
}

pub fn fit_with_floor(durations: &[f64], k: usize, epsilon_floor: f64) -> Result<DurationModel> {
    if durations.is_empty() {
        return Err(Error::Data("no durations to partition".into()));
    }
    if k == 0 {
        return Err(Error::Config("duration partition count must be >= 1".into()));
    }
    if durations.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::Data("durations must be finite and non-negative".into()));
    }
    let floored: Vec<f64> = durations.iter().map(|&d| d.max(epsilon_floor)).collect();
    let logs: Vec<f64> = floored.iter().map(|d| d.log10()).collect();

    let mut sorted = logs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for &x in &sorted {
        match distinct.last_mut() {
            Some((v, w)) if *v == x => *w += 1.0,
            _ => distinct.push((x, 1.0)),
        }
    }
    let mut k = k;
    if distinct.len() < k {
        warn!(requested = k, distinct = distinct.len(), "fewer distinct durations than partitions");
        k = distinct.len();
    }
    let mut centroids = optimal_centroids(&distinct, k);

    let mut members = vec![Vec::new(); centroids.len()];
    for (&x, &d) in logs.iter().zip(&floored) {
        members[nearest(&centroids, x)].push(d);
    }
    // A centroid can end up with nothing nearest to it only in degenerate
    // float cases; keep partitions non-empty.
    let keep: Vec<bool> = members.iter().map(|m| !m.is_empty()).collect();
    if keep.iter().any(|k| !k) {
        centroids = centroids
            .into_iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(c, _)| c)
            .collect();
        members = vec![Vec::new(); centroids.len()];
        for (&x, &d) in logs.iter().zip(&floored) {
            members[nearest(&centroids, x)].push(d);
        }
    }

    Ok(DurationModel {
        k: centroids.len(),
        centroids,
        members,
        epsilon_floor,
    })
}

impl DurationModel {
    /// Partition of the nearest centroid in log space; ties go to the lower index.
    pub fn duration_to_token(&self, q: f64) -> usize {
        nearest(&self.centroids, q.max(self.epsilon_floor).log10())
    }

    /// Uniform member of the partition, jittered uniformly within ±q/10.
    pub fn sample_duration<R: Rng + ?Sized>(&self, token: usize, rng: &mut R) -> Result<f64> {
        let members = self.members.get(token).ok_or(Error::InvalidToken {
            token,
            limit: self.k,
        })?;
        let q = members[rng.random_range(0..members.len())];
        let e = q / 10.0;
        let jittered = if e > 0.0 { rng.random_range(q - e..=q + e) } else { q };
        Ok(jittered.max(0.0))
    }

    pub fn member_bounds(&self, token: usize) -> Option<(f64, f64)> {
        let m = self.members.get(token)?;
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn three_magnitudes() -> Vec<f64> {
        let mut v = Vec::new();
        for _ in 0..10 {
            v.extend([0.001, 1.0, 60.0]);
        }
        v
    }

    /// Exhaustive 1-D k-means: optimal clusters are contiguous in sorted
    /// order, so try every pair of split points.
    fn brute_force_three_way(values: &[f64]) -> Vec<Vec<f64>> {
        let mut sorted: Vec<f64> = values.iter().map(|v| v.log10()).collect();
        sorted.sort_by(f64::total_cmp);
        let sse = |s: &[f64]| {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            s.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        let n = sorted.len();
        let mut best = (f64::INFINITY, 0, 0);
        for a in 1..n - 1 {
            for b in a + 1..n {
                let cost = sse(&sorted[..a]) + sse(&sorted[a..b]) + sse(&sorted[b..]);
                if cost < best.0 - 1e-12 {
                    best = (cost, a, b);
                }
            }
        }
        let (_, a, b) = best;
        [&sorted[..a], &sorted[a..b], &sorted[b..]]
            .iter()
            .map(|s| s.iter().map(|x| 10f64.powf(*x)).collect())
            .collect()
    }

    #[test]
    fn separates_magnitudes_like_exhaustive_kmeans() {
        let data = three_magnitudes();
        let model = fit_duration_partitions(&data, 3).unwrap();
        assert_eq!(model.k, 3);
        let oracle = brute_force_three_way(&data);
        for (got, want) in model.members.iter().zip(&oracle) {
            let mut got = got.clone();
            got.sort_by(f64::total_cmp);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() / w < 1e-9);
            }
        }
        assert!(model.centroids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn constant_durations_collapse_to_one_partition() {
        let model = fit_duration_partitions(&[0.5; 40], 8).unwrap();
        assert_eq!(model.k, 1);
        assert_eq!(model.members[0].len(), 40);
    }

    #[test]
    fn zero_is_floored() {
        let model = fit_duration_partitions(&[0.0, 0.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(model.members[0], vec![DEFAULT_EPSILON_FLOOR; 2]);
        assert_eq!(model.duration_to_token(0.0), 0);
    }

    #[test]
    fn token_lookup() {
        let model = fit_duration_partitions(&three_magnitudes(), 3).unwrap();
        assert_eq!(model.duration_to_token(60.0), 2);
        assert_eq!(model.duration_to_token(0.001), 0);
        // midway in log space between centroids 0 and 1 goes to the lower index
        let mid = 10f64.powf((model.centroids[0] + model.centroids[1]) / 2.0);
        let tie = DurationModel {
            k: 2,
            centroids: vec![-3.0, 0.0],
            members: vec![vec![0.001], vec![1.0]],
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
        };
        assert_eq!(tie.duration_to_token(10f64.powf(-1.5)), 0);
        assert!(model.duration_to_token(mid) <= 1);
    }

    #[test]
    fn sampling_respects_tenth_noise() {
        let model = DurationModel {
            k: 2,
            centroids: vec![-6.0, 0.0],
            members: vec![vec![DEFAULT_EPSILON_FLOOR], vec![1.0]],
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
        };
        let mut rng = seed::rng(3);
        for _ in 0..1000 {
            let q = model.sample_duration(1, &mut rng).unwrap();
            assert!((0.9..=1.1).contains(&q));
            let f = model.sample_duration(0, &mut rng).unwrap();
            assert!((0.9e-6..=1.1e-6).contains(&f));
        }
        assert!(matches!(
            model.sample_duration(2, &mut rng),
            Err(Error::InvalidToken { token: 2, limit: 2 })
        ));
    }

    #[test]
    fn sampling_is_seeded() {
        let model = fit_duration_partitions(&three_magnitudes(), 3).unwrap();
        let draw = |s| {
            let mut rng = seed::rng(s);
            (0..20).map(|i| model.sample_duration(i % 3, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn samples_map_back_to_their_partition() {
        let model = fit_duration_partitions(&three_magnitudes(), 3).unwrap();
        let mut rng = seed::rng(5);
        for t in 0..3 {
            for _ in 0..200 {
                let q = model.sample_duration(t, &mut rng).unwrap();
                assert_eq!(model.duration_to_token(q), t);
            }
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let data: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 * 0.013).collect();
        assert_eq!(
            fit_duration_partitions(&data, 8).unwrap(),
            fit_duration_partitions(&data, 8).unwrap()
        );
    }

    #[test]
    fn invalid_inputs() {
        assert!(fit_duration_partitions(&[], 3).is_err());
        assert!(fit_duration_partitions(&[1.0], 0).is_err());
    }
}

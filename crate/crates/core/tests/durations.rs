use iotflow_core::durations::{fit_duration_partitions, fit_with_floor, DEFAULT_EPSILON_FLOOR};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Optimal 1-D k-means by dynamic programming over sorted values.
fn optimal_partition(values: &[f64], k: usize) -> Vec<Vec<f64>> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let cost = |i: usize, j: usize| {
        let s = &v[i..j];
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    };
    let mut best = vec![vec![f64::INFINITY; n + 1]; k + 1];
    let mut cut = vec![vec![0; n + 1]; k + 1];
    best[0][0] = 0.0;
    for c in 1..=k {
        for j in c..=n {
            for i in (c - 1)..j {
                let total = best[c - 1][i] + cost(i, j);
                if total < best[c][j] {
                    best[c][j] = total;
                    cut[c][j] = i;
                }
            }
        }
    }
    let mut groups = Vec::new();
    let mut j = n;
    for c in (1..=k).rev() {
        let i = cut[c][j];
        groups.push(v[i..j].to_vec());
        j = i;
    }
    groups.reverse();
    groups
}

#[test]
fn magnitudes_match_the_kmeans_oracle() {
    let data: Vec<f64> = [0.001, 1.0, 60.0].iter().flat_map(|&q| std::iter::repeat_n(q, 10)).collect();
    let model = fit_duration_partitions(&data, 3).unwrap();
    let logs: Vec<f64> = data.iter().map(|q| q.log10()).collect();
    let want: Vec<Vec<f64>> = optimal_partition(&logs, 3)
        .into_iter()
        .map(|g| g.into_iter().map(|x| 10f64.powf(x)).collect())
        .collect();
    assert_eq!(model.members.len(), 3);
    for (got, want) in model.members.iter().zip(&want) {
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
    }
    for (t, q) in [0.001, 1.0, 60.0].into_iter().enumerate() {
        assert_eq!(model.duration_to_token(q), t);
    }
}

#[test]
fn degenerate_and_floor_rules() {
    let model = fit_duration_partitions(&[0.25; 12], 5).unwrap();
    assert_eq!(model.k, 1);
    let model = fit_duration_partitions(&[0.0, 0.0, 1.0, 1.0], 2).unwrap();
    assert_eq!(model.members[0], vec![DEFAULT_EPSILON_FLOOR; 2]);
    assert_eq!(model.duration_to_token(0.0), 0);
    // Midway in log space between 0.01 and 1.0 is 0.1.
    let model = fit_duration_partitions(&[0.01, 0.01, 1.0, 1.0], 2).unwrap();
    assert_eq!(model.duration_to_token(0.1), 0);
}

#[test]
fn jitter_is_a_tenth_of_the_member() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let one = fit_duration_partitions(&[1.0; 4], 1).unwrap();
    let floor = fit_with_floor(&[0.0; 4], 1, 1e-6).unwrap();
    for _ in 0..1000 {
        let q = one.sample_duration(0, &mut rng).unwrap();
        assert!((0.9..=1.1).contains(&q));
        let e = floor.sample_duration(0, &mut rng).unwrap();
        assert!((0.9e-6..=1.1e-6).contains(&e), "{e}");
    }
    let a: Vec<f64> = {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        (0..20).map(|_| one.sample_duration(0, &mut r).unwrap()).collect()
    };
    let b: Vec<f64> = {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        (0..20).map(|_| one.sample_duration(0, &mut r).unwrap()).collect()
    };
    assert_eq!(a, b);
    assert!(one.sample_duration(1, &mut rng).is_err());
}

fn sse(groups: &[Vec<f64>]) -> f64 {
    groups
        .iter()
        .map(|g| {
            let m = g.iter().sum::<f64>() / g.len() as f64;
            g.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fit_reaches_the_optimal_cost(data in prop::collection::vec(1e-5f64..1e4, 1..30), k in 1usize..5) {
        let model = fit_duration_partitions(&data, k).unwrap();
        let logs: Vec<Vec<f64>> = model.members.iter().map(|m| m.iter().map(|q| q.log10()).collect()).collect();
        let all: Vec<f64> = data.iter().map(|q| q.log10()).collect();
        let want = optimal_partition(&all, model.k);
        prop_assert!((sse(&logs) - sse(&want)).abs() <= 1e-9 * (1.0 + sse(&want)));
    }

    #[test]
    fn samples_stay_inside_member_bounds(
        data in prop::collection::vec(prop_oneof![Just(0.0), 1e-7f64..1e3], 1..80),
        k in 1usize..9,
        seed in any::<u64>(),
    ) {
        let model = fit_duration_partitions(&data, k).unwrap();
        prop_assert_eq!(&model, &fit_duration_partitions(&data, k).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in 0..model.k {
            let (lo, hi) = model.member_bounds(t).unwrap();
            for _ in 0..20 {
                let q = model.sample_duration(t, &mut rng).unwrap();
                prop_assert!(q >= 0.9 * lo && q <= 1.1 * hi);
            }
        }
    }

    #[test]
    fn separated_partitions_round_trip(
        picks in prop::collection::vec((0usize..4, 0.95f64..1.05), 8..60),
        seed in any::<u64>(),
    ) {
        // Centers two decades apart: jittered samples never cross a boundary.
        let data: Vec<f64> = picks.iter().map(|&(m, f)| 10f64.powi(2 * m as i32 - 4) * f).collect();
        let distinct = picks.iter().map(|p| p.0).collect::<std::collections::BTreeSet<_>>().len();
        let model = fit_duration_partitions(&data, distinct).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in 0..model.k {
            for _ in 0..10 {
                let q = model.sample_duration(t, &mut rng).unwrap();
                prop_assert_eq!(model.duration_to_token(q), t);
            }
        }
    }
}

//! Density clustering over integer length vectors that share one direction
//! pattern.
//!
//! Points are deduplicated and carry a multiplicity. A point is a core point
//! when the summed multiplicity of its eps-neighborhood (itself included)
//! reaches `min_samples`, which reproduces plain DBSCAN over the expanded
//! multiset.

use std::collections::VecDeque;

/// Cluster label per point, `None` for noise.
pub fn dbscan_weighted(
    points: &[Vec<u32>],
    weights: &[usize],
    eps: f64,
    min_samples: usize,
) -> Vec<Option<usize>> {
    assert_eq!(points.len(), weights.len());
    let n = points.len();
    let neighbors = neighborhoods(points, eps);
    let is_core: Vec<bool> = (0..n)
        .map(|i| neighbors[i].iter().map(|&j| weights[j]).sum::<usize>() >= min_samples)
        .collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next_label = 0;
    for start in 0..n {
        if labels[start].is_some() || !is_core[start] {
            continue;
        }
        let label = next_label;
        next_label += 1;
        labels[start] = Some(label);
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            if !is_core[p] {
                continue;
            }
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(label);
                    queue.push_back(q);
                }
            }
        }
    }
    labels
}

/// Eps-neighborhoods (including the point itself) by Euclidean distance.
///
/// Candidates are pruned on the first coordinate, which bounds the full
/// distance from below.
fn neighborhoods(points: &[Vec<u32>], eps: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| points[i].first().copied().unwrap_or(0));
    let eps_sq = eps * eps;
    let mut out = vec![Vec::new(); n];
    for (rank, &i) in order.iter().enumerate() {
        out[i].push(i);
        let head = points[i].first().copied().unwrap_or(0) as f64;
        for &j in &order[rank + 1..] {
            let other = points[j].first().copied().unwrap_or(0) as f64;
            if other - head > eps {
                break;
            }
            let d2: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum();
            if d2 <= eps_sq {
                out[i].push(j);
                out[j].push(i);
            }
        }
    }
    for list in &mut out {
        list.sort_unstable();
    }
    out
}

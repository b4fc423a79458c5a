use std::collections::{BTreeMap, BTreeSet};

use super::dbscan::dbscan_weighted;
use super::{Signature, SignatureConfig, SignatureRange};
use crate::error::Result;
use crate::ingest::Direction;

/// Mine signatures from length/direction flows.
///
/// For every size in `cfg.min_size..=cfg.max_size`, every subarray of every
/// flow is clustered; each cluster becomes a list of per-position
/// `(min, max, direction)` ranges. Identical range lists are emitted once.
pub fn extract_signatures(
    flows: &[Vec<(u32, Direction)>],
    cfg: &SignatureConfig,
) -> Result<Vec<Signature>> {
    cfg.validate()?;
    let mut seen: BTreeSet<Vec<SignatureRange>> = BTreeSet::new();
    let mut out = Vec::new();
    for size in cfg.min_size..=cfg.max_size {
        for ranges in clusters_of_size(flows, size, cfg.d, cfg.s) {
            if seen.insert(ranges.clone()) {
                out.push(Signature {
                    signature_id: out.len() as u32,
                    ranges,
                    support_count: 0,
                });
            }
        }
    }
    Ok(out)
}

fn clusters_of_size(
    flows: &[Vec<(u32, Direction)>],
    size: usize,
    eps: f64,
    min_samples: usize,
) -> Vec<Vec<SignatureRange>> {
    // Subarrays whose direction patterns differ are at maximal distance, so
    // each pattern is clustered on its own.
    let mut groups: BTreeMap<Vec<Direction>, BTreeMap<Vec<u32>, usize>> = BTreeMap::new();
    for flow in flows {
        if flow.len() < size {
            continue;
        }
        for sub in flow.windows(size) {
            let dirs: Vec<Direction> = sub.iter().map(|p| p.1).collect();
            let lens: Vec<u32> = sub.iter().map(|p| p.0).collect();
            *groups.entry(dirs).or_default().entry(lens).or_default() += 1;
        }
    }

    let mut result = Vec::new();
    for (dirs, counts) in groups {
        let total: usize = counts.values().sum();
        if total < min_samples {
            continue;
        }
        let (points, weights): (Vec<Vec<u32>>, Vec<usize>) = counts.into_iter().unzip();
        let labels = dbscan_weighted(&points, &weights, eps, min_samples);
        let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
        let mut bounds: Vec<Vec<(u32, u32)>> = vec![vec![(u32::MAX, 0); size]; n_clusters];
        for (point, label) in points.iter().zip(&labels) {
            if let Some(c) = label {
                for (slot, &len) in bounds[*c].iter_mut().zip(point) {
                    slot.0 = slot.0.min(len);
                    slot.1 = slot.1.max(len);
                }
            }
        }
        for cluster in bounds {
            result.push(
                cluster
                    .into_iter()
                    .zip(&dirs)
                    .map(|((min_len, max_len), &direction)| SignatureRange {
                        min_len,
                        max_len,
                        direction,
                    })
                    .collect(),
            );
        }
    }
    result
}

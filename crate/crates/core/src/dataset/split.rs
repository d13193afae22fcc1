use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SceneDataset;
use crate::error::{Error, Result};

/// Image counts per role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    /// Policy-training pool.
    pub train: usize,
    /// Evaluation pool the acquisition functions label from.
    pub eval: usize,
    /// Reward / early-stopping set.
    pub reward: usize,
    /// State set.
    pub state: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.eval + self.reward + self.state
    }
}

/// Disjoint image index lists for the four data roles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub d_t: Vec<usize>,
    pub d_v: Vec<usize>,
    pub d_r: Vec<usize>,
    pub d_s: Vec<usize>,
}

/// Splits image indices into the four roles.
///
/// A labeled pool of `train + state` images is drawn first; the state set is
/// picked from it greedily to match the pool's class distribution and the
/// rest becomes the training pool. Reward and evaluation images follow from
/// the same permutation.
pub fn split_dataset(dataset: &SceneDataset, sizes: SplitSizes, seed: u64) -> Result<Splits> {
    if sizes.total() > dataset.len() {
        return Err(Error::config(
            "splits",
            format!("sizes sum to {} but the dataset has {} images", sizes.total(), dataset.len()),
        ));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let labeled_end = sizes.train + sizes.state;
    let labeled = &order[..labeled_end];
    let d_s = if sizes.state == 0 {
        Vec::new()
    } else {
        let target = normalize(&dataset.class_counts(labeled));
        select_state_set(dataset, labeled, &target, sizes.state)?
    };
    let d_t = labeled.iter().copied().filter(|i| !d_s.contains(i)).collect();
    let d_r = order[labeled_end..labeled_end + sizes.reward].to_vec();
    let d_v_start = labeled_end + sizes.reward;
    let d_v = order[d_v_start..d_v_start + sizes.eval].to_vec();
    Ok(Splits { d_t, d_v, d_r, d_s })
}

/// Greedy distribution matching: repeatedly add the candidate whose inclusion
/// brings the selected set's class histogram closest (L1) to `target`.
/// Ties go to the smallest image index.
pub fn select_state_set(
    dataset: &SceneDataset,
    candidates: &[usize],
    target: &[f64],
    m: usize,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("state-set selection needs candidates"));
    }
    if m > candidates.len() {
        return Err(Error::config("splits.state", "more state images requested than candidates"));
    }
    if target.len() != dataset.num_classes() {
        return Err(Error::Dimension {
            context: "target histogram",
            expected: dataset.num_classes(),
            actual: target.len(),
        });
    }
    let per_image: Vec<(usize, Vec<u64>)> = candidates
        .iter()
        .map(|&i| (i, dataset.class_counts(&[i])))
        .collect();
    Ok(greedy_select(&per_image, target, m))
}

pub(crate) fn greedy_select(per_image: &[(usize, Vec<u64>)], target: &[f64], m: usize) -> Vec<usize> {
    let mut remaining: Vec<&(usize, Vec<u64>)> = per_image.iter().collect();
    let mut running = vec![0u64; target.len()];
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best: Option<(f64, usize, usize)> = None;
        for (pos, (idx, counts)) in remaining.iter().enumerate() {
            let merged: Vec<u64> = running.iter().zip(counts).map(|(a, b)| a + b).collect();
            let d = l1(&normalize(&merged), target);
            let better = match best {
                None => true,
                Some((bd, bidx, _)) => d < bd || (d == bd && *idx < bidx),
            };
            if better {
                best = Some((d, *idx, pos));
            }
        }
        let (_, idx, pos) = best.expect("remaining is nonempty while m <= candidates");
        for (r, c) in running.iter_mut().zip(&remaining[pos].1) {
            *r += c;
        }
        chosen.push(idx);
        remaining.remove(pos);
    }
    chosen
}

pub(crate) fn normalize(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

//! Acquisition functions sharing one interface: uniform sampling, summed
//! pixel entropy, summed pixel BALD, and the learned query policy.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{RegionId, SceneDataset};
use crate::error::{Error, Result};
use crate::featurize::{fitted_pool_size, pixel_entropy, sample_pools, state_features, ActionContext, FeatureConfig};
use crate::learner::{PredictionMap, Segmenter};
use crate::policy::{select_subactions, QNet};

/// How regions are chosen, with the candidate pool size used per step.
///
/// Baselines draw a single pool of `pool_size` regions and keep the top `K`;
/// the query policy draws `K` disjoint pools of `pool_size` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AcquisitionScorer {
    Uniform { pool_size: usize },
    Entropy { pool_size: usize },
    Bald { pool_size: usize, passes: usize },
    Dqn { pool_size: usize },
}

impl AcquisitionScorer {
    pub fn tag(&self) -> &'static str {
        match self {
            AcquisitionScorer::Uniform { .. } => "U",
            AcquisitionScorer::Entropy { .. } => "H",
            AcquisitionScorer::Bald { .. } => "B",
            AcquisitionScorer::Dqn { .. } => "DQN",
        }
    }

    pub fn pool_size(&self) -> usize {
        match *self {
            AcquisitionScorer::Uniform { pool_size }
            | AcquisitionScorer::Entropy { pool_size }
            | AcquisitionScorer::Bald { pool_size, .. }
            | AcquisitionScorer::Dqn { pool_size } => pool_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size() == 0 {
            return Err(Error::config("scorer.pool_size", "must be positive"));
        }
        if let AcquisitionScorer::Bald { passes, .. } = *self {
            if passes < 2 {
                return Err(Error::config("scorer.passes", "BALD needs at least two MC-dropout passes"));
            }
        }
        Ok(())
    }
}

/// Summed per-pixel entropy of the region's predictions, in nats.
pub fn score_entropy<L: Segmenter>(learner: &L, data: &SceneDataset, region: RegionId) -> Result<f64> {
    Ok(entropy_sum(&learner.predict_region(data, region)?))
}

pub fn entropy_sum(pred: &PredictionMap) -> f64 {
    pred.pixels().map(pixel_entropy).sum()
}

/// Per-pixel BALD, `H[mean p] - mean H[p]`, over MC-dropout samples.
pub fn bald_map(samples: &[PredictionMap]) -> Result<Array2<f64>> {
    let first = samples.first().ok_or(Error::EmptyInput("BALD needs MC samples"))?;
    let (h, w, c) = (first.height(), first.width(), first.num_classes());
    if samples.iter().any(|s| s.probs().dim() != (h, w, c)) {
        return Err(Error::Dimension { context: "MC sample shape", expected: h * w * c, actual: 0 });
    }
    let n = samples.len() as f64;
    let mut mean_p = vec![0.0; c];
    Ok(Array2::from_shape_fn((h, w), |(r, col)| {
        mean_p.fill(0.0);
        let mut mean_h = 0.0;
        for s in samples {
            let p = s.pixel(r, col);
            for (m, &v) in mean_p.iter_mut().zip(p.iter()) {
                *m += v / n;
            }
            mean_h += pixel_entropy(p) / n;
        }
        let h_mean = -mean_p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
        // Mutual information is nonnegative; clamp rounding noise.
        (h_mean - mean_h).max(0.0)
    }))
}

/// Summed per-pixel BALD from `passes` seeded MC-dropout passes.
pub fn score_bald<L: Segmenter>(
    learner: &L,
    data: &SceneDataset,
    region: RegionId,
    passes: usize,
    seed: u64,
) -> Result<f64> {
    if passes < 2 {
        return Err(Error::DegenerateBald("need at least two MC-dropout passes"));
    }
    if learner.dropout_rate() == 0.0 {
        return Err(Error::DegenerateBald("dropout rate 0 makes every pass identical"));
    }
    let samples = learner.predict_region_mc(data, region, passes, seed)?;
    Ok(bald_map(&samples)?.sum())
}

/// Indices of the `k` highest scores; equal scores go to the lowest region id.
pub fn top_k(scored: &[(RegionId, f64)], k: usize) -> Vec<RegionId> {
    let mut order: Vec<&(RegionId, f64)> = scored.iter().collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    order.into_iter().take(k).map(|(r, _)| *r).collect()
}

/// What the query policy needs to act during acquisition.
pub struct PolicyView<'a> {
    pub qnet: &'a QNet,
    pub features: &'a FeatureConfig,
    pub state_data: &'a SceneDataset,
    pub state_images: &'a [usize],
}

/// Picks `k` unlabeled regions.
#[allow(clippy::too_many_arguments)]
pub fn acquire<L: Segmenter>(
    scorer: &AcquisitionScorer,
    learner: &L,
    data: &SceneDataset,
    labeled: &[RegionId],
    unlabeled: &[RegionId],
    k: usize,
    policy: Option<&PolicyView<'_>>,
    rng: &mut dyn RngCore,
) -> Result<Vec<RegionId>> {
    scorer.validate()?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let pool_size = scorer.pool_size();
    match *scorer {
        AcquisitionScorer::Uniform { .. } | AcquisitionScorer::Entropy { .. } | AcquisitionScorer::Bald { .. } => {
            if pool_size < k {
                return Err(Error::InsufficientRegions { needed: k, available: pool_size });
            }
            let draw = pool_size.min(unlabeled.len());
            if draw < k {
                return Err(Error::InsufficientRegions { needed: k, available: unlabeled.len() });
            }
            let pool = sample_pools(unlabeled, 1, draw, rng.next_u64())?.remove(0);
            match *scorer {
                AcquisitionScorer::Uniform { .. } => Ok(pool[..k].to_vec()),
                AcquisitionScorer::Entropy { .. } => {
                    let scored: Vec<Result<(RegionId, f64)>> = pool
                        .par_iter()
                        .map(|&r| Ok((r, score_entropy(learner, data, r)?)))
                        .collect();
                    Ok(top_k(&scored.into_iter().collect::<Result<Vec<_>>>()?, k))
                }
                AcquisitionScorer::Bald { passes, .. } => {
                    let seed = rng.next_u64();
                    let scored: Vec<Result<(RegionId, f64)>> = pool
                        .par_iter()
                        .enumerate()
                        .map(|(i, &r)| Ok((r, score_bald(learner, data, r, passes, seed.wrapping_add(i as u64))?)))
                        .collect();
                    Ok(top_k(&scored.into_iter().collect::<Result<Vec<_>>>()?, k))
                }
                AcquisitionScorer::Dqn { .. } => unreachable!(),
            }
        }
        AcquisitionScorer::Dqn { .. } => {
            let view = policy.ok_or_else(|| Error::config("scorer", "DQN acquisition needs a trained policy"))?;
            let state = state_features(learner, view.state_data, view.state_images, view.features)?;
            let n = fitted_pool_size(pool_size, k, unlabeled.len()).max(1);
            let pools = sample_pools(unlabeled, k, n, rng.next_u64())?;
            let context = ActionContext::build(learner, data, labeled, unlabeled, view.features, rng.next_u64())?;
            let features = pools
                .iter()
                .map(|p| crate::featurize::pool_features(learner, data, p, &context, view.features))
                .collect::<Result<Vec<_>>>()?;
            let chosen = select_subactions(view.qnet, &state, &features, 0.0, rng)?;
            Ok(chosen.into_iter().map(|a| a.region).collect())
        }
    }
}

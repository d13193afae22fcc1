//! State and action representations for the query network.
//!
//! A region is summarized by the normalized counts of its arg-max predictions
//! and by min/avg/max pooled maps of its per-pixel entropy. The state is the
//! concatenation of those summaries over every region of the state set. A
//! candidate action adds two histograms of KL divergences: one against the
//! ground-truth class distributions of the labeled regions and one against the
//! predicted distributions of a sample of unlabeled regions.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{RegionId, SceneDataset, VOID};
use crate::error::{Error, Result};
use crate::learner::{argmax, PredictionMap, Segmenter};

/// Additive smoothing applied to both arguments of every KL divergence.
pub const KL_SMOOTHING: f64 = 1e-6;

/// Which feature blocks are emitted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureVariant {
    /// Max-pooled entropy only, no KL blocks.
    #[serde(rename = "1h")]
    OneH,
    /// Min/avg/max-pooled entropy, no KL blocks.
    #[serde(rename = "3h")]
    ThreeH,
    /// Min/avg/max-pooled entropy plus both KL histograms.
    #[default]
    #[serde(rename = "3h-kl")]
    ThreeHKl,
}

impl FeatureVariant {
    pub fn label(self) -> &'static str {
        match self {
            FeatureVariant::OneH => "1H",
            FeatureVariant::ThreeH => "3H",
            FeatureVariant::ThreeHKl => "3H+KL",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub pooled_grid: usize,
    /// Left edges of the KL bins; the last bin is open-ended.
    pub kl_edges: Vec<f64>,
    #[serde(default)]
    pub variant: FeatureVariant,
    /// Unlabeled regions compared against each candidate.
    pub unlabeled_sample: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            pooled_grid: 2,
            kl_edges: vec![0.0, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0],
            variant: FeatureVariant::ThreeHKl,
            unlabeled_sample: 200,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pooled_grid == 0 {
            return Err(Error::config("features.pooled_grid", "must be >= 1"));
        }
        if self.kl_edges.is_empty() || self.kl_edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::config("features.kl_edges", "need at least one finite edge"));
        }
        if self.kl_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("features.kl_edges", "edges must be strictly increasing"));
        }
        Ok(())
    }

    pub fn kl_bins(&self) -> usize {
        self.kl_edges.len()
    }

    pub fn layout(&self, num_classes: usize) -> FeatureLayout {
        let g2 = self.pooled_grid * self.pooled_grid;
        let (entropy_dim, kl_bins) = match self.variant {
            FeatureVariant::OneH => (g2, 0),
            FeatureVariant::ThreeH => (3 * g2, 0),
            FeatureVariant::ThreeHKl => (3 * g2, self.kl_bins()),
        };
        FeatureLayout { num_classes, entropy_dim, kl_bins }
    }
}

/// Vector widths implied by a feature configuration and class count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub num_classes: usize,
    pub entropy_dim: usize,
    /// Bins per KL histogram; 0 when the KL blocks are disabled.
    pub kl_bins: usize,
}

impl FeatureLayout {
    /// Class distribution plus pooled entropy.
    pub fn region_dim(&self) -> usize {
        self.num_classes + self.entropy_dim
    }

    pub fn kl_dim(&self) -> usize {
        2 * self.kl_bins
    }

    pub fn action_dim(&self) -> usize {
        self.region_dim() + self.kl_dim()
    }

    pub fn state_dim(&self, state_regions: usize) -> usize {
        state_regions * self.region_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFeatures {
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionFeatures {
    pub region: RegionId,
    pub values: Vec<f64>,
}

impl ActionFeatures {
    /// Class distribution and pooled entropy.
    pub fn base(&self, layout: &FeatureLayout) -> &[f64] {
        &self.values[..layout.region_dim()]
    }

    /// Both KL histograms.
    pub fn kl(&self, layout: &FeatureLayout) -> &[f64] {
        &self.values[layout.region_dim()..]
    }
}

/// Candidates of one sub-action slot.
pub type CandidatePool = Vec<ActionFeatures>;

/// Normalized counts of arg-max predictions.
pub fn class_distribution(pred: &PredictionMap) -> Vec<f64> {
    let mut counts = vec![0usize; pred.num_classes()];
    let mut n = 0;
    for p in pred.pixels() {
        counts[argmax(p)] += 1;
        n += 1;
    }
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

pub fn pixel_entropy(p: ArrayView1<f64>) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Per-pixel Shannon entropy in nats.
pub fn entropy_map(pred: &PredictionMap) -> Array2<f64> {
    let (h, w) = (pred.height(), pred.width());
    Array2::from_shape_fn((h, w), |(r, c)| pixel_entropy(pred.pixel(r, c)))
}

/// Splits `n` into `g` contiguous cells whose sizes differ by at most one,
/// the larger cells trailing.
fn cell_bounds(n: usize, g: usize) -> Vec<(usize, usize)> {
    let (base, rem) = (n / g, n % g);
    let mut start = 0;
    (0..g)
        .map(|i| {
            let len = base + usize::from(i >= g - rem);
            let cell = (start, start + len);
            start += len;
            cell
        })
        .collect()
}

/// Min-, then average-, then max-pooled `g x g` grids, each row-major.
pub fn pooled_entropy_features(map: ArrayView2<f64>, g: usize) -> Result<Vec<f64>> {
    let (h, w) = map.dim();
    if g == 0 || g > h || g > w {
        return Err(Error::Dimension { context: "pooling grid vs region size", expected: h.min(w), actual: g });
    }
    let rows = cell_bounds(h, g);
    let cols = cell_bounds(w, g);
    let g2 = g * g;
    let mut out = vec![0.0; 3 * g2];
    for (i, &(r0, r1)) in rows.iter().enumerate() {
        for (j, &(c0, c1)) in cols.iter().enumerate() {
            let cell = map.slice(ndarray::s![r0..r1, c0..c1]);
            let k = i * g + j;
            out[k] = cell.iter().copied().fold(f64::INFINITY, f64::min);
            out[g2 + k] = cell.sum() / cell.len() as f64;
            out[2 * g2 + k] = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Ok(out)
}

fn entropy_block(pred: &PredictionMap, config: &FeatureConfig) -> Result<Vec<f64>> {
    let pooled = pooled_entropy_features(entropy_map(pred).view(), config.pooled_grid)?;
    Ok(match config.variant {
        FeatureVariant::OneH => pooled[2 * config.pooled_grid * config.pooled_grid..].to_vec(),
        FeatureVariant::ThreeH | FeatureVariant::ThreeHKl => pooled,
    })
}

/// Class distribution followed by the entropy block.
pub fn region_features(pred: &PredictionMap, config: &FeatureConfig) -> Result<Vec<f64>> {
    let mut v = class_distribution(pred);
    v.extend(entropy_block(pred, config)?);
    Ok(v)
}

/// Region summaries over every region of the state images, in enumeration order.
pub fn state_features<L: Segmenter>(
    learner: &L,
    data: &SceneDataset,
    d_s: &[usize],
    config: &FeatureConfig,
) -> Result<StateFeatures> {
    if d_s.is_empty() {
        return Err(Error::EmptyInput("state set has no images"));
    }
    let (rh, rw) = (data.region_height(), data.region_width());
    let per_image: Vec<Result<Vec<f64>>> = d_s
        .par_iter()
        .map(|&i| {
            if i >= data.len() {
                return Err(Error::RegionOutOfRange(RegionId::new(i, 0, 0)));
            }
            let pred = learner.predict_image(data.image(i))?;
            let mut v = Vec::new();
            for gr in 0..data.grid_rows() {
                for gc in 0..data.grid_cols() {
                    let probs = pred
                        .probs()
                        .slice(ndarray::s![gr * rh..(gr + 1) * rh, gc * rw..(gc + 1) * rw, ..])
                        .to_owned();
                    v.extend(region_features(&PredictionMap::new(probs), config)?);
                }
            }
            Ok(v)
        })
        .collect();
    let mut values = Vec::new();
    for part in per_image {
        values.extend(part?);
    }
    Ok(StateFeatures { values })
}

/// `KL(p || q)` after smoothing and renormalizing both arguments.
pub fn smoothed_kl(p: &[f64], q: &[f64]) -> f64 {
    let zp = 1.0 + KL_SMOOTHING * p.len() as f64;
    let zq = 1.0 + KL_SMOOTHING * q.len() as f64;
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = (a + KL_SMOOTHING) / zp;
            let b = (b + KL_SMOOTHING) / zq;
            a * (a / b).ln()
        })
        .sum()
}

/// Index of the bin containing `x`; values below the first edge go to bin 0.
pub fn kl_bin(x: f64, edges: &[f64]) -> usize {
    edges.iter().rposition(|&e| x >= e).unwrap_or(0)
}

/// Normalized histogram of `KL(p || q)` over `others`; all zeros when empty.
pub fn kl_histogram(p: &[f64], others: &[Vec<f64>], edges: &[f64]) -> Vec<f64> {
    let mut hist = vec![0.0; edges.len()];
    if others.is_empty() {
        return hist;
    }
    for q in others {
        hist[kl_bin(smoothed_kl(p, q), edges)] += 1.0;
    }
    let n = others.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    hist
}

/// Comparison sets for KL features, built once per acquisition step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActionContext {
    /// Ground-truth class distributions of labeled regions with any non-VOID pixel.
    pub labeled: Vec<Vec<f64>>,
    /// Predicted class distributions of a sample of unlabeled regions.
    pub unlabeled: Vec<Vec<f64>>,
}

impl ActionContext {
    pub fn build<L: Segmenter>(
        learner: &L,
        data: &SceneDataset,
        labeled: &[RegionId],
        unlabeled: &[RegionId],
        config: &FeatureConfig,
        seed: u64,
    ) -> Result<Self> {
        if config.variant != FeatureVariant::ThreeHKl {
            return Ok(ActionContext::default());
        }
        let c = data.num_classes();
        let mut gt = Vec::with_capacity(labeled.len());
        for &r in labeled {
            let patch = data.reveal_labels(r)?;
            let mut counts = vec![0u64; c];
            crate::dataset::add_label_counts(&mut counts, patch.iter().copied().filter(|&l| l != VOID));
            let total: u64 = counts.iter().sum();
            if total > 0 {
                gt.push(counts.iter().map(|&k| k as f64 / total as f64).collect());
            }
        }
        let take = config.unlabeled_sample.min(unlabeled.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = index::sample(&mut rng, unlabeled.len(), take).into_vec();
        picks.sort_unstable();
        let preds: Vec<Result<Vec<f64>>> = picks
            .par_iter()
            .map(|&i| Ok(class_distribution(&learner.predict_region(data, unlabeled[i])?)))
            .collect();
        let unlabeled = preds.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(ActionContext { labeled: gt, unlabeled })
    }
}

pub fn action_features<L: Segmenter>(
    learner: &L,
    data: &SceneDataset,
    region: RegionId,
    context: &ActionContext,
    config: &FeatureConfig,
) -> Result<ActionFeatures> {
    let pred = learner.predict_region(data, region)?;
    let dist = class_distribution(&pred);
    let mut values = dist.clone();
    values.extend(entropy_block(&pred, config)?);
    if config.variant == FeatureVariant::ThreeHKl {
        values.extend(kl_histogram(&dist, &context.labeled, &config.kl_edges));
        values.extend(kl_histogram(&dist, &context.unlabeled, &config.kl_edges));
    }
    Ok(ActionFeatures { region, values })
}

/// Features for every region of a pool, in pool order.
pub fn pool_features<L: Segmenter>(
    learner: &L,
    data: &SceneDataset,
    pool: &[RegionId],
    context: &ActionContext,
    config: &FeatureConfig,
) -> Result<CandidatePool> {
    pool.par_iter()
        .map(|&r| action_features(learner, data, r, context, config))
        .collect()
}

/// Draws `k * n` distinct regions uniformly and deals them into `k` pools of `n`.
/// Pool size actually drawn: `n`, shrunk so that `k` disjoint pools fit in
/// `available` regions. Zero when not even one region per pool is left.
pub fn fitted_pool_size(n: usize, k: usize, available: usize) -> usize {
    if k == 0 {
        return 0;
    }
    n.min(available / k)
}

pub fn sample_pools(unlabeled: &[RegionId], k: usize, n: usize, seed: u64) -> Result<Vec<Vec<RegionId>>> {
    let needed = k * n;
    if needed == 0 {
        return Err(Error::config("pools", "K and N must be positive"));
    }
    if unlabeled.len() < needed {
        return Err(Error::InsufficientRegions { needed, available: unlabeled.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, unlabeled.len(), needed).into_vec();
    Ok(picks
        .chunks(n)
        .map(|chunk| chunk.iter().map(|&i| unlabeled[i]).collect())
        .collect())
}

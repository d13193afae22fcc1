//! Seeded synthetic scenes with a controllable class imbalance.
//!
//! Background classes fill a coarse Voronoi partition of each image, with
//! geometrically decaying weights so the background itself is imbalanced.
//! Rare classes are painted on top as filled discs. Blob placement tracks a
//! running pixel deficit per rare class across the whole set, so the empirical
//! frequency converges to the configured target as the image count grows.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SceneDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RareClass {
    pub class: usize,
    /// Target fraction of all pixels carrying this class.
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub region_height: usize,
    pub region_width: usize,
    pub rare_classes: Vec<RareClass>,
    /// Disc radius range `[min, max]` in pixels for rare-class objects.
    pub object_size_range: [f64; 2],
    pub noise_sigma: f64,
    /// 0 keeps signatures as drawn; values toward 1 pull all of them to their mean.
    pub signature_overlap: f64,
    /// Random displacement applied to every signature (domain shift).
    #[serde(default)]
    pub signature_shift: f64,
    pub signature_seed: u64,
    pub seed: u64,
    /// Number of Voronoi cells used for the background layout.
    #[serde(default = "default_background_cells")]
    pub background_cells: usize,
}

fn default_background_cells() -> usize {
    6
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..255).contains(&self.num_classes) {
            return Err(Error::config("gen.num_classes", "must be in 2..255"));
        }
        if self.num_images == 0 {
            return Err(Error::config("gen.num_images", "must be positive"));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("gen.channels/height/width", "must be positive"));
        }
        if self.region_height == 0
            || self.region_width == 0
            || self.height % self.region_height != 0
            || self.width % self.region_width != 0
        {
            return Err(Error::config(
                "gen.region_height/region_width",
                "region dims must divide image dims exactly",
            ));
        }
        let mut seen = vec![false; self.num_classes];
        let mut total = 0.0;
        for rare in &self.rare_classes {
            if rare.class >= self.num_classes {
                return Err(Error::config("gen.rare_classes", "class id out of range"));
            }
            if std::mem::replace(&mut seen[rare.class], true) {
                return Err(Error::config("gen.rare_classes", "duplicate class id"));
            }
            if !(0.0..=1.0).contains(&rare.frequency) {
                return Err(Error::config("gen.rare_classes", "frequency must lie in [0, 1]"));
            }
            total += rare.frequency;
        }
        if total > 1.0 {
            return Err(Error::config("gen.rare_classes", "frequencies sum to more than 1"));
        }
        if seen.iter().all(|&s| s) {
            return Err(Error::config("gen.rare_classes", "at least one background class is required"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("gen.noise_sigma", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.signature_overlap) {
            return Err(Error::config("gen.signature_overlap", "must lie in [0, 1)"));
        }
        if !(self.signature_shift >= 0.0) {
            return Err(Error::config("gen.signature_shift", "must be >= 0"));
        }
        let [lo, hi] = self.object_size_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config("gen.object_size_range", "need 0 < min <= max"));
        }
        if self.background_cells == 0 {
            return Err(Error::config("gen.background_cells", "must be positive"));
        }
        Ok(())
    }

    fn background_classes(&self) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|c| self.rare_classes.iter().all(|r| r.class != *c))
            .collect()
    }
}

/// Per-class feature signatures (one row per class), as stored in pixels.
pub fn class_signatures(config: &GenConfig) -> Vec<Vec<f32>> {
    let dim = config.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.signature_seed);
    let mut raw: Vec<Vec<f64>> = Vec::with_capacity(config.num_classes);
    for _ in 0..config.num_classes {
        let mut best: Option<(f64, Vec<f64>)> = None;
        // Rejection sampling for well-separated unit vectors.
        for _ in 0..1000 {
            let v = unit_vector(&mut rng, dim);
            let gap = raw
                .iter()
                .map(|u| dist(u, &v))
                .fold(f64::INFINITY, f64::min);
            if best.as_ref().is_none_or(|(g, _)| gap > *g) {
                best = Some((gap, v));
            }
            if gap >= 0.5 {
                break;
            }
        }
        raw.push(best.expect("at least one draw").1);
    }

    let mean: Vec<f64> = (0..dim)
        .map(|k| raw.iter().map(|u| u[k]).sum::<f64>() / raw.len() as f64)
        .collect();
    let w = config.signature_overlap;
    let mut shift_rng = ChaCha8Rng::seed_from_u64(config.signature_seed ^ 0x9e37_79b9_7f4a_7c15);
    raw.iter()
        .map(|u| {
            let shift: Vec<f64> = (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut shift_rng);
                    config.signature_shift * z / (dim as f64).sqrt()
                })
                .collect();
            (0..dim)
                .map(|k| ((1.0 - w) * u[k] + w * mean[k] + shift[k]) as f32)
                .collect()
        })
        .collect()
}

pub fn generate_scenes(config: &GenConfig) -> Result<SceneDataset> {
    config.validate()?;
    let signatures = class_signatures(config);
    let background = config.background_classes();
    let bg_weights: Vec<f64> = (0..background.len()).map(|i| 0.5f64.powi(i as i32)).collect();
    let bg_total: f64 = bg_weights.iter().sum();

    let (h, w, ch) = (config.height, config.width, config.channels);
    let pixels = (h * w) as f64;
    let [rmin, rmax] = config.object_size_range;
    let mean_area = PI * (0.5 * (rmin + rmax)).powi(2);
    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| Error::config("gen.noise_sigma", e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut painted = vec![0.0f64; config.rare_classes.len()];
    let mut images = Vec::with_capacity(config.num_images);
    let mut labels = Vec::with_capacity(config.num_images);

    for index in 0..config.num_images {
        let mut label = Array2::<u8>::zeros((h, w));

        // Background: nearest-seed Voronoi cells.
        let cells: Vec<(f64, f64, u8)> = (0..config.background_cells)
            .map(|_| {
                let y = rng.random::<f64>() * h as f64;
                let x = rng.random::<f64>() * w as f64;
                let mut pick = rng.random::<f64>() * bg_total;
                let mut class = background[background.len() - 1];
                for (c, wt) in background.iter().zip(&bg_weights) {
                    if pick < *wt {
                        class = *c;
                        break;
                    }
                    pick -= wt;
                }
                (y, x, class as u8)
            })
            .collect();
        for r in 0..h {
            for c in 0..w {
                let (py, px) = (r as f64 + 0.5, c as f64 + 0.5);
                let nearest = cells
                    .iter()
                    .min_by(|a, b| {
                        let da = (a.0 - py).powi(2) + (a.1 - px).powi(2);
                        let db = (b.0 - py).powi(2) + (b.1 - px).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("background_cells > 0");
                label[[r, c]] = nearest.2;
            }
        }

        // Rare objects, only over background pixels.
        let mut is_rare = Array2::<bool>::from_elem((h, w), false);
        for (k, rare) in config.rare_classes.iter().enumerate() {
            let target = rare.frequency * pixels * (index + 1) as f64;
            let mut attempts = 0;
            while painted[k] + 0.5 * mean_area < target && attempts < 64 {
                attempts += 1;
                let radius = rmin + rng.random::<f64>() * (rmax - rmin);
                let cy = rng.random::<f64>() * h as f64;
                let cx = rng.random::<f64>() * w as f64;
                let r0 = (cy - radius).floor().max(0.0) as usize;
                let r1 = ((cy + radius).ceil() as usize).min(h);
                let c0 = (cx - radius).floor().max(0.0) as usize;
                let c1 = ((cx + radius).ceil() as usize).min(w);
                for r in r0..r1 {
                    for c in c0..c1 {
                        let d2 = (r as f64 + 0.5 - cy).powi(2) + (c as f64 + 0.5 - cx).powi(2);
                        if d2 <= radius * radius && !is_rare[[r, c]] {
                            is_rare[[r, c]] = true;
                            label[[r, c]] = rare.class as u8;
                            painted[k] += 1.0;
                        }
                    }
                }
            }
        }

        let mut image = Array3::<f32>::zeros((h, w, ch));
        for r in 0..h {
            for c in 0..w {
                let sig = &signatures[usize::from(label[[r, c]])];
                for k in 0..ch {
                    let z: f64 = if config.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    image[[r, c, k]] = (f64::from(sig[k]) + z) as f32;
                }
            }
        }
        images.push(image);
        labels.push(label);
    }

    SceneDataset::new(
        config.num_classes,
        config.region_height,
        config.region_width,
        images,
        labels,
    )
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
pub(crate) fn small_config(seed: u64) -> GenConfig {
    GenConfig {
        num_images: 6,
        height: 16,
        width: 16,
        channels: 3,
        num_classes: 4,
        region_height: 8,
        region_width: 8,
        rare_classes: vec![RareClass {
            class: 3,
            frequency: 0.05,
        }],
        object_size_range: [1.5, 2.5],
        noise_sigma: 0.1,
        signature_overlap: 0.2,
        signature_shift: 0.0,
        signature_seed: 7,
        seed,
        background_cells: 4,
    }
}

//! Segmentation metrics and label-distribution statistics.
//!
//! All entropies are in nats, with `0 ln 0 = 0`.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dataset::VOID;
use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per non-VOID pixel.
    pub fn accumulate(&mut self, pred: ArrayView2<u8>, labels: ArrayView2<u8>) -> Result<()> {
        if pred.dim() != labels.dim() {
            return Err(Error::Dimension {
                context: "prediction vs label map",
                expected: labels.len(),
                actual: pred.len(),
            });
        }
        self.accumulate_pixels(pred.iter().copied().zip(labels.iter().copied()))
    }

    /// Same as [`accumulate`](Self::accumulate) over `(pred, label)` pairs.
    pub fn accumulate_pixels(&mut self, pixels: impl IntoIterator<Item = (u8, u8)>) -> Result<()> {
        let c = self.num_classes;
        for (p, t) in pixels {
            if t == VOID {
                continue;
            }
            for v in [p, t] {
                if usize::from(v) >= c {
                    return Err(Error::ClassOutOfRange { class: v, num_classes: c });
                }
            }
            self.counts[usize::from(t) * c + usize::from(p)] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn mean_iou(&self) -> MeanIou {
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..c).filter(|&j| j != k).map(|j| self.get(k, j)).sum();
                let fp: u64 = (0..c).filter(|&j| j != k).map(|j| self.get(j, k)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let miou = mean_present(&per_class);
        MeanIou { per_class, miou }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanIou {
    /// `None` for classes absent from both ground truth and predictions.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Mean over the present entries; 0 when nothing is present.
pub fn mean_present(values: &[Option<f64>]) -> f64 {
    let (sum, n) = values
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Normalized histogram of non-VOID ground-truth labels.
pub fn label_histogram<'a>(
    patches: impl IntoIterator<Item = ArrayView2<'a, u8>>,
    num_classes: usize,
) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    for patch in patches {
        for &l in patch {
            if l == VOID {
                continue;
            }
            let k = usize::from(l);
            if k >= num_classes {
                return Err(Error::ClassOutOfRange { class: l, num_classes });
            }
            counts[k] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput("label histogram needs a non-VOID pixel"));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Shannon entropy of a distribution, in nats.
pub fn distribution_entropy(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

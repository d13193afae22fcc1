//! The segmentation model.
//!
//! [`Segmenter`] is the contract the acquisition machinery relies on: class
//! probabilities per pixel, MC-dropout samples, one-step updates on newly
//! labeled regions, convergence training, and a resettable initial snapshot.
//!
//! [`MlpLearner`] is the reference implementation: a per-pixel multilayer
//! perceptron over the raw channels of a `(2r+1) x (2r+1)` window around each
//! pixel (zero padded at image borders). Layout:
//! `Dense -> [BatchNorm -> ReLU -> Dense]* -> BatchNorm -> ReLU -> Dropout -> Dense -> softmax`.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{RegionId, SceneDataset, VOID};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::nn::{softmax_rows, Builder, Mode, Op, Sgd, Stack};

/// Per-pixel class probabilities, `height x width x classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    probs: Array3<f64>,
}

impl PredictionMap {
    pub fn new(probs: Array3<f64>) -> Self {
        PredictionMap { probs }
    }

    pub(crate) fn from_rows(height: usize, width: usize, rows: Array2<f64>) -> Self {
        let c = rows.ncols();
        let probs = rows
            .into_shape_with_order((height, width, c))
            .expect("row count matches height * width");
        PredictionMap { probs }
    }

    pub fn probs(&self) -> ArrayView3<'_, f64> {
        self.probs.view()
    }

    pub fn height(&self) -> usize {
        self.probs.dim().0
    }

    pub fn width(&self) -> usize {
        self.probs.dim().1
    }

    pub fn num_classes(&self) -> usize {
        self.probs.dim().2
    }

    pub fn pixel(&self, r: usize, c: usize) -> ArrayView1<'_, f64> {
        self.probs.slice(s![r, c, ..])
    }

    /// Per-pixel iterator over probability vectors, row-major.
    pub fn pixels(&self) -> impl Iterator<Item = ArrayView1<'_, f64>> {
        self.probs.lanes(Axis(2)).into_iter()
    }

    /// Arg-max class per pixel; ties resolve to the lowest class id.
    pub fn argmax(&self) -> Array2<u8> {
        let (h, w, _) = self.probs.dim();
        Array2::from_shape_fn((h, w), |(r, c)| argmax(self.pixel(r, c)) as u8)
    }
}

pub fn argmax(p: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Epochs without improvement tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig { patience: 10, max_epochs: 200 }
    }
}

/// Images (by index into a dataset) used to score a model.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub data: &'a SceneDataset,
    pub images: &'a [usize],
}

/// What the acquisition loop needs from a segmentation model.
pub trait Segmenter: Clone + Send + Sync {
    fn num_classes(&self) -> usize;

    fn dropout_rate(&self) -> f64;

    fn predict_image(&self, image: ArrayView3<f32>) -> Result<PredictionMap>;

    /// Prediction restricted to one region, with full-image context.
    fn predict_region(&self, data: &SceneDataset, region: RegionId) -> Result<PredictionMap>;

    /// `passes` stochastic forward passes with dropout active.
    fn predict_region_mc(
        &self,
        data: &SceneDataset,
        region: RegionId,
        passes: usize,
        seed: u64,
    ) -> Result<Vec<PredictionMap>>;

    /// One optimizer step on the given labeled regions; returns the pre-step loss.
    fn train_step(&mut self, data: &SceneDataset, regions: &[RegionId], rng: &mut dyn RngCore) -> Result<f64>;

    /// Trains on `labeled` with early stopping on `reward`, keeping the best
    /// parameters seen. Returns their mean IoU on `reward`.
    fn train_to_convergence(
        &mut self,
        data: &SceneDataset,
        labeled: &[RegionId],
        reward: EvalSet<'_>,
        config: ConvergenceConfig,
        rng: &mut dyn RngCore,
    ) -> Result<f64>;

    fn reset_to_initial(&mut self);

    fn evaluate(&self, set: EvalSet<'_>) -> Result<ConfusionMatrix> {
        let parts: Vec<Result<ConfusionMatrix>> = set
            .images
            .par_iter()
            .map(|&i| {
                let pred = self.predict_image(set.data.image(i))?.argmax();
                let mut conf = ConfusionMatrix::new(self.num_classes());
                conf.accumulate(pred.view(), set.data.labels(i))?;
                Ok(conf)
            })
            .collect();
        let mut conf = ConfusionMatrix::new(self.num_classes());
        for part in parts {
            conf.merge(&part?);
        }
        Ok(conf)
    }

    fn mean_iou(&self, set: EvalSet<'_>) -> Result<f64> {
        Ok(self.evaluate(set)?.mean_iou().miou)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub window_radius: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Pixels per mini-batch during convergence training.
    pub batch_size: usize,
    pub seed: u64,
    /// Per-step updates revisit every labeled region instead of only new ones.
    #[serde(default)]
    pub replay_old_regions: bool,
    /// After `capture_initial`, batch norm keeps its running statistics
    /// fixed and normalizes with them during training.
    #[serde(default = "default_true")]
    pub finetune_freeze_norm: bool,
}

fn default_true() -> bool {
    true
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            window_radius: 1,
            hidden: vec![32],
            dropout: 0.2,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 256,
            seed: 0,
            replay_old_regions: false,
            finetune_freeze_norm: true,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("learner.hidden", "need at least one nonzero hidden size"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("learner.dropout", "must lie in [0, 1)"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("learner.lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("learner.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("learner.weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("learner.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Fixed at construction; a checkpoint only loads into the same architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: usize,
    pub num_classes: usize,
    pub window_radius: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        let side = 2 * self.window_radius + 1;
        side * side * self.channels
    }

    fn build(&self) -> (Stack, usize, usize) {
        let mut b = Builder::default();
        let mut ops = vec![Op::Dense(b.dense(self.input_dim(), self.hidden[0]))];
        for pair in self.hidden.windows(2) {
            ops.push(Op::Norm(b.norm(pair[0])));
            ops.push(Op::Relu);
            ops.push(Op::Dense(b.dense(pair[0], pair[1])));
        }
        let last = *self.hidden.last().expect("validated nonempty");
        ops.push(Op::Norm(b.norm(last)));
        ops.push(Op::Relu);
        ops.push(Op::Dropout(self.dropout));
        ops.push(Op::Dense(b.dense(last, self.num_classes)));
        (Stack { ops }, b.param_len(), b.stats_len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Snapshot {
    params: Vec<f64>,
    stats: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpLearner {
    config: LearnerConfig,
    arch: Architecture,
    stack: Stack,
    params: Vec<f64>,
    stats: Vec<f64>,
    velocity: Vec<f64>,
    initial: Snapshot,
    norm_frozen: bool,
}

/// Builds a learner and captures its initial snapshot.
pub fn init_learner(config: &LearnerConfig, num_classes: usize, channels: usize, seed: u64) -> Result<MlpLearner> {
    config.validate()?;
    if num_classes < 2 || channels == 0 {
        return Err(Error::config("learner", "need >= 2 classes and >= 1 channel"));
    }
    let arch = Architecture {
        channels,
        num_classes,
        window_radius: config.window_radius,
        hidden: config.hidden.clone(),
        dropout: config.dropout,
    };
    let (stack, np, ns) = arch.build();
    let mut params = vec![0.0; np];
    let mut stats = vec![0.0; ns];
    stack.init(&mut params, &mut stats, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(MlpLearner {
        config: config.clone(),
        arch,
        stack,
        initial: Snapshot { params: params.clone(), stats: stats.clone() },
        norm_frozen: false,
        velocity: vec![0.0; np],
        params,
        stats,
    })
}

/// Window features for every pixel of `rows x cols` in row-major order.
pub fn window_features(
    image: ArrayView3<f32>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    radius: usize,
) -> Array2<f64> {
    let (h, w, ch) = image.dim();
    let side = 2 * radius + 1;
    let dim = side * side * ch;
    let n = rows.len() * cols.len();
    let mut out = Array2::zeros((n, dim));
    let r = radius as isize;
    for (i, (pr, pc)) in rows
        .flat_map(|pr| cols.clone().map(move |pc| (pr, pc)))
        .enumerate()
    {
        let mut row = out.row_mut(i);
        let mut j = 0;
        for dr in -r..=r {
            for dc in -r..=r {
                let (y, x) = (pr as isize + dr, pc as isize + dc);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    for k in 0..ch {
                        row[j + k] = f64::from(image[[y as usize, x as usize, k]]);
                    }
                }
                j += ch;
            }
        }
    }
    out
}

impl MlpLearner {
    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn stats(&self) -> &[f64] {
        &self.stats
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn initial_params(&self) -> &[f64] {
        &self.initial.params
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Replaces the initial snapshot with the current parameters.
    ///
    /// Also freezes batch-norm statistics when `finetune_freeze_norm` is set.
    pub fn capture_initial(&mut self) {
        self.initial = Snapshot { params: self.params.clone(), stats: self.stats.clone() };
        self.norm_frozen = self.config.finetune_freeze_norm;
    }

    pub fn norm_frozen(&self) -> bool {
        self.norm_frozen
    }

    fn train_mode(&self) -> Mode {
        Mode { batch_stats: !self.norm_frozen, dropout: true }
    }

    fn sgd(&self) -> Sgd {
        Sgd {
            lr: self.config.lr,
            momentum: self.config.momentum,
            weight_decay: self.config.weight_decay,
        }
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        if channels != self.arch.channels {
            return Err(Error::Dimension {
                context: "image channels",
                expected: self.arch.channels,
                actual: channels,
            });
        }
        Ok(())
    }

    /// Class probabilities for pre-extracted window features.
    pub fn probabilities(&self, inputs: Array2<f64>, mode: Mode, rng: Option<&mut dyn RngCore>) -> Array2<f64> {
        let (mut logits, _) = self.stack.forward(&self.params, &self.stats, inputs, mode, rng);
        softmax_rows(&mut logits);
        logits
    }

    fn region_inputs(&self, data: &SceneDataset, region: RegionId) -> Result<Array2<f64>> {
        data.check_region(region)?;
        self.check_channels(data.channels())?;
        let (r0, c0) = data.region_origin(region);
        Ok(window_features(
            data.image(region.image),
            r0..r0 + data.region_height(),
            c0..c0 + data.region_width(),
            self.arch.window_radius,
        ))
    }

    /// Non-VOID pixels of the given regions as `(inputs, labels)`.
    pub fn labeled_pixels(&self, data: &SceneDataset, regions: &[RegionId]) -> Result<(Array2<f64>, Vec<u8>)> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &region in regions {
            let inputs = self.region_inputs(data, region)?;
            let truth = data.reveal_labels(region)?;
            for (row, &l) in inputs.rows().into_iter().zip(truth.iter()) {
                if l != VOID {
                    rows.extend(row.iter().copied());
                    labels.push(l);
                }
            }
        }
        let dim = self.arch.input_dim();
        let inputs = Array2::from_shape_vec((labels.len(), dim), rows).expect("row-major rows");
        Ok((inputs, labels))
    }

    /// Mean cross-entropy and its gradient for one batch (training mode).
    ///
    /// `rng` drives the dropout masks; replaying the same seed reproduces them,
    /// which is what finite-difference checks rely on.
    pub fn loss_and_gradient(
        &self,
        inputs: &Array2<f64>,
        labels: &[u8],
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Vec<f64>, crate::nn::Tape)> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyInput("training batch has no labeled pixels"));
        }
        let (mut probs, tape) =
            self.stack
                .forward(&self.params, &self.stats, inputs.clone(), self.train_mode(), Some(rng));
        softmax_rows(&mut probs);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let k = usize::from(l);
            if k >= self.arch.num_classes {
                return Err(Error::ClassOutOfRange { class: l, num_classes: self.arch.num_classes });
            }
            loss -= probs[[i, k]].max(f64::MIN_POSITIVE).ln();
            probs[[i, k]] -= 1.0;
        }
        loss /= n as f64;
        probs /= n as f64;
        let mut grads = vec![0.0; self.params.len()];
        self.stack.backward(&self.params, &mut grads, &tape, probs);
        Ok((loss, grads, tape))
    }

    /// Mean cross-entropy in training mode without touching any state.
    pub fn batch_loss(&self, inputs: &Array2<f64>, labels: &[u8], rng: &mut dyn RngCore) -> f64 {
        let probs = self.probabilities(inputs.clone(), self.train_mode(), Some(rng));
        -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| probs[[i, usize::from(l)]].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / labels.len() as f64
    }

    /// One SGD step on a prepared batch; returns the pre-step loss.
    pub fn step_on_batch(&mut self, inputs: &Array2<f64>, labels: &[u8], rng: &mut dyn RngCore) -> Result<f64> {
        let (loss, grads, tape) = self.loss_and_gradient(inputs, labels, rng)?;
        if !self.norm_frozen {
            self.stack.update_running_stats(&mut self.stats, &tape, labels.len());
        }
        let sgd = self.sgd();
        sgd.step(&mut self.params, &grads, &mut self.velocity);
        Ok(loss)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let blob = LearnerCheckpoint {
            magic: *LEARNER_MAGIC,
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.clone(),
            stats: self.stats.clone(),
            velocity: self.velocity.clone(),
            initial: self.initial.clone(),
            norm_frozen: self.norm_frozen,
        };
        let bytes = bincode::serialize(&blob).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, refusing one built for a different architecture.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let loaded = load_checkpoint(path)?;
        if loaded.arch != self.arch {
            return Err(Error::Architecture(format!(
                "checkpoint {:?} does not match learner {:?}",
                loaded.arch, self.arch
            )));
        }
        *self = loaded;
        Ok(())
    }
}

const LEARNER_MAGIC: &[u8; 8] = b"RLSEGLRN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LearnerCheckpoint {
    magic: [u8; 8],
    version: u32,
    config: LearnerConfig,
    arch: Architecture,
    params: Vec<f64>,
    stats: Vec<f64>,
    velocity: Vec<f64>,
    initial: Snapshot,
    norm_frozen: bool,
}

pub fn load_checkpoint(path: &Path) -> Result<MlpLearner> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let blob: LearnerCheckpoint =
        bincode::deserialize(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    if &blob.magic != LEARNER_MAGIC {
        return Err(Error::format(path, "not a learner checkpoint"));
    }
    if blob.version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: blob.version, expected: CHECKPOINT_VERSION });
    }
    let (stack, np, ns) = blob.arch.build();
    let lens_ok = blob.params.len() == np
        && blob.velocity.len() == np
        && blob.initial.params.len() == np
        && blob.stats.len() == ns
        && blob.initial.stats.len() == ns;
    if !lens_ok {
        return Err(Error::format(path, "parameter buffers do not match the stored architecture"));
    }
    Ok(MlpLearner {
        config: blob.config,
        arch: blob.arch,
        stack,
        params: blob.params,
        stats: blob.stats,
        velocity: blob.velocity,
        initial: blob.initial,
        norm_frozen: blob.norm_frozen,
    })
}

impl Segmenter for MlpLearner {
    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn dropout_rate(&self) -> f64 {
        self.arch.dropout
    }

    fn predict_image(&self, image: ArrayView3<f32>) -> Result<PredictionMap> {
        let (h, w, ch) = image.dim();
        self.check_channels(ch)?;
        let inputs = window_features(image, 0..h, 0..w, self.arch.window_radius);
        Ok(PredictionMap::from_rows(h, w, self.probabilities(inputs, Mode::EVAL, None)))
    }

    fn predict_region(&self, data: &SceneDataset, region: RegionId) -> Result<PredictionMap> {
        let inputs = self.region_inputs(data, region)?;
        let probs = self.probabilities(inputs, Mode::EVAL, None);
        Ok(PredictionMap::from_rows(data.region_height(), data.region_width(), probs))
    }

    fn predict_region_mc(
        &self,
        data: &SceneDataset,
        region: RegionId,
        passes: usize,
        seed: u64,
    ) -> Result<Vec<PredictionMap>> {
        if passes == 0 {
            return Err(Error::config("passes", "MC-dropout needs at least one pass"));
        }
        let inputs = self.region_inputs(data, region)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..passes)
            .map(|_| {
                let probs = self.probabilities(inputs.clone(), Mode::MC_DROPOUT, Some(&mut rng));
                PredictionMap::from_rows(data.region_height(), data.region_width(), probs)
            })
            .collect())
    }

    fn train_step(&mut self, data: &SceneDataset, regions: &[RegionId], rng: &mut dyn RngCore) -> Result<f64> {
        let (inputs, labels) = self.labeled_pixels(data, regions)?;
        self.step_on_batch(&inputs, &labels, rng)
    }

    fn train_to_convergence(
        &mut self,
        data: &SceneDataset,
        labeled: &[RegionId],
        reward: EvalSet<'_>,
        config: ConvergenceConfig,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        if labeled.is_empty() {
            return Err(Error::EmptyInput("convergence training needs labeled regions"));
        }
        let (inputs, labels) = self.labeled_pixels(data, labeled)?;
        if labels.is_empty() {
            return Err(Error::EmptyInput("labeled regions contain only VOID pixels"));
        }
        let batch = self.config.batch_size;
        let mut order: Vec<usize> = (0..labels.len()).collect();
        // The starting point competes too, so fine-tuning never makes things worse on `reward`.
        let start = Snapshot { params: self.params.clone(), stats: self.stats.clone() };
        let mut best = Some((self.mean_iou(reward)?, start, self.velocity.clone()));
        let mut since_best = 0;
        for _ in 0..config.max_epochs.max(1) {
            order.shuffle(rng);
            for chunk in order.chunks(batch) {
                let x = inputs.select(Axis(0), chunk);
                let y: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
                self.step_on_batch(&x, &y, rng)?;
            }
            let miou = self.mean_iou(reward)?;
            if best.as_ref().is_none_or(|(b, _, _)| miou > *b) {
                let snap = Snapshot { params: self.params.clone(), stats: self.stats.clone() };
                best = Some((miou, snap, self.velocity.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            if since_best >= config.patience {
                break;
            }
        }
        let (miou, snap, velocity) = best.expect("at least one epoch ran");
        self.params = snap.params;
        self.stats = snap.stats;
        self.velocity = velocity;
        Ok(miou)
    }

    fn reset_to_initial(&mut self) {
        self.params.clone_from(&self.initial.params);
        self.stats.clone_from(&self.initial.stats);
        self.velocity.fill(0.0);
    }
}

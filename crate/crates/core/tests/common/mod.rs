//! Brute-force reference implementations shared by the oracle suite and the
//! acceptance report. Every oracle is a plain loop over the definition and
//! never calls the routine it checks.

#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlseg_core::baselines::{bald_map, entropy_sum};
use rlseg_core::dataset::{GenConfig, RareClass, RegionId, VOID};
use rlseg_core::featurize::{
    class_distribution, entropy_map, kl_histogram, pooled_entropy_features, smoothed_kl, ActionFeatures,
    FeatureLayout, StateFeatures, KL_SMOOTHING,
};
use rlseg_core::learner::{init_learner, LearnerConfig, PredictionMap};
use rlseg_core::metrics::ConfusionMatrix;
use rlseg_core::policy::{QNet, QNetConfig, QNetShape};

/// Outcome of one oracle comparison over many random instances.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub instances: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tol
    }

    pub fn line(&self) -> String {
        format!(
            "{:<28} {:>5} instances  max err {:.3e}  tol {:.0e}",
            self.name, self.instances, self.max_err, self.tol
        )
    }
}

pub const KERNEL_TOL: f64 = 1e-9;
pub const ANALYTIC_KL_TOL: f64 = 1e-3;
pub const INSTANCES: usize = 200;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_INSTANCES: usize = 24;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random probability vector. With `quantized`, entries come from a few
/// integer weights so arg-max ties are frequent.
pub fn random_dist(rng: &mut ChaCha8Rng, c: usize, quantized: bool) -> Vec<f64> {
    let w: Vec<f64> = (0..c)
        .map(|_| if quantized { rng.random_range(0..3) as f64 } else { rng.random::<f64>() })
        .collect();
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        return vec![1.0 / c as f64; c];
    }
    w.iter().map(|v| v / total).collect()
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, quantized: bool) -> PredictionMap {
    let mut probs = Array3::zeros((h, w, c));
    for r in 0..h {
        for col in 0..w {
            let p = random_dist(rng, c, quantized);
            for k in 0..c {
                probs[[r, col, k]] = p[k];
            }
        }
    }
    PredictionMap::new(probs)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle and kernel disagree on length");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn naive_entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

fn pixel(map: &PredictionMap, r: usize, c: usize) -> Vec<f64> {
    map.pixel(r, c).to_vec()
}

pub fn check_entropy(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (h, w, c) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(2..9));
        let quantized = rng.random_bool(0.3);
        let map = random_map(&mut rng, h, w, c, quantized);
        let got = entropy_map(&map);
        let mut total = 0.0;
        for r in 0..h {
            for col in 0..w {
                let e = naive_entropy(&pixel(&map, r, col));
                total += e;
                err = err.max((got[[r, col]] - e).abs());
            }
        }
        err = err.max((entropy_sum(&map) - total).abs());
    }
    Check { name: "entropy", instances: INSTANCES, max_err: err, tol: KERNEL_TOL }
}

pub fn check_class_distribution(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (h, w, c) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(2..9));
        let map = random_map(&mut rng, h, w, c, true);
        let mut counts = vec![0.0; c];
        for r in 0..h {
            for col in 0..w {
                let p = pixel(&map, r, col);
                let mut best = 0;
                for k in 1..c {
                    if p[k] > p[best] {
                        best = k;
                    }
                }
                counts[best] += 1.0;
            }
        }
        let expect: Vec<f64> = counts.iter().map(|v| v / (h * w) as f64).collect();
        err = err.max(max_abs(&class_distribution(&map), &expect));
    }
    Check { name: "class distribution", instances: INSTANCES, max_err: err, tol: KERNEL_TOL }
}

/// Pooling with cells assigned pixel by pixel: cell `i` of `g` over `n`
/// pixels holds `n / g` of them, plus one for the last `n % g` cells.
fn naive_pool(map: &Array2<f64>, g: usize) -> Vec<f64> {
    let (h, w) = map.dim();
    let cell_of = |n: usize| {
        let mut owner = Vec::with_capacity(n);
        for i in 0..g {
            let len = n / g + if i >= g - n % g { 1 } else { 0 };
            owner.extend(std::iter::repeat(i).take(len));
        }
        owner
    };
    let (rows, cols) = (cell_of(h), cell_of(w));
    let g2 = g * g;
    let mut min = vec![f64::INFINITY; g2];
    let mut max = vec![f64::NEG_INFINITY; g2];
    let mut sum = vec![0.0; g2];
    let mut n = vec![0.0; g2];
    for r in 0..h {
        for c in 0..w {
            let k = rows[r] * g + cols[c];
            let v = map[[r, c]];
            min[k] = min[k].min(v);
            max[k] = max[k].max(v);
            sum[k] += v;
            n[k] += 1.0;
        }
    }
    let avg: Vec<f64> = sum.iter().zip(&n).map(|(s, n)| s / n).collect();
    [min, avg, max].concat()
}

pub fn check_pooling(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for _ in 0..INSTANCES {
        let g = rng.random_range(1..4);
        let (h, w) = (rng.random_range(g..13), rng.random_range(g..13));
        let map = Array2::from_shape_fn((h, w), |_| rng.random::<f64>() * 2.0);
        let got = pooled_entropy_features(map.view(), g).expect("valid grid");
        err = err.max(max_abs(&got, &naive_pool(&map, g)));
    }
    Check { name: "pooling", instances: INSTANCES, max_err: err, tol: KERNEL_TOL }
}

fn naive_smoothed_kl(p: &[f64], q: &[f64]) -> f64 {
    let c = p.len() as f64;
    let mut kl = 0.0;
    for i in 0..p.len() {
        let a = (p[i] + KL_SMOOTHING) / (1.0 + c * KL_SMOOTHING);
        let b = (q[i] + KL_SMOOTHING) / (1.0 + c * KL_SMOOTHING);
        kl += a * (a.ln() - b.ln());
    }
    kl
}

fn naive_bin(x: f64, edges: &[f64]) -> usize {
    let mut bin = 0;
    for (i, &e) in edges.iter().enumerate() {
        if x >= e {
            bin = i;
        }
    }
    bin
}

pub fn random_edges(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut edges = vec![0.0];
    for _ in 0..rng.random_range(1..8) {
        let last = *edges.last().unwrap();
        edges.push(last + rng.random_range(0.01..1.0));
    }
    edges
}

pub fn check_kl_histogram(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for _ in 0..INSTANCES {
        let c = rng.random_range(2..9);
        let quantized = rng.random_bool(0.5);
        let p = random_dist(&mut rng, c, quantized);
        let others: Vec<Vec<f64>> = (0..rng.random_range(0..12)).map(|_| random_dist(&mut rng, c, quantized)).collect();
        let edges = random_edges(&mut rng);
        let mut expect = vec![0.0; edges.len()];
        for q in &others {
            err = err.max((smoothed_kl(&p, q) - naive_smoothed_kl(&p, q)).abs());
            expect[naive_bin(naive_smoothed_kl(&p, q), &edges)] += 1.0;
        }
        if !others.is_empty() {
            expect.iter_mut().for_each(|v| *v /= others.len() as f64);
        }
        err = err.max(max_abs(&kl_histogram(&p, &others, &edges), &expect));
    }
    Check { name: "KL histogram", instances: INSTANCES, max_err: err, tol: KERNEL_TOL }
}

/// Smoothed KL against the textbook formula on distributions bounded away from zero.
pub fn check_kl_analytic(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for _ in 0..INSTANCES {
        let c = rng.random_range(2..9);
        let bounded = |rng: &mut ChaCha8Rng| {
            let w: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
            let t: f64 = w.iter().sum();
            w.iter().map(|v| v / t).collect::<Vec<f64>>()
        };
        let (p, q) = (bounded(&mut rng), bounded(&mut rng));
        let exact: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        err = err.max((smoothed_kl(&p, &q) - exact).abs());
    }
    Check { name: "smoothed KL vs analytic", instances: INSTANCES, max_err: err, tol: ANALYTIC_KL_TOL }
}

pub fn check_confusion_iou(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for _ in 0..INSTANCES {
        let c: usize = rng.random_range(2..7);
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let pred = Array2::from_shape_fn((h, w), |_| rng.random_range(0..c) as u8);
        let truth = Array2::from_shape_fn((h, w), |_| {
            if rng.random_bool(0.15) { VOID } else { rng.random_range(0..c) as u8 }
        });
        let mut conf = ConfusionMatrix::new(c);
        conf.accumulate(pred.view(), truth.view()).expect("valid labels");
        let iou = conf.mean_iou();

        let mut sum = 0.0;
        let mut present = 0.0;
        for k in 0..c as u8 {
            let (mut inter, mut union) = (0.0, 0.0);
            for (&p, &t) in pred.iter().zip(truth.iter()) {
                if t == VOID {
                    continue;
                }
                if p == k && t == k {
                    inter += 1.0;
                }
                if p == k || t == k {
                    union += 1.0;
                }
            }
            match iou.per_class[k as usize] {
                Some(v) => {
                    err = err.max((v - inter / union).abs());
                    sum += inter / union;
                    present += 1.0;
                }
                None => assert_eq!(union, 0.0, "class {k} reported absent but seen"),
            }
        }
        let expect = if present > 0.0 { sum / present } else { 0.0 };
        err = err.max((iou.miou - expect).abs());
    }
    Check { name: "confusion / IoU", instances: INSTANCES, max_err: err, tol: KERNEL_TOL }
}

pub fn check_bald(seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut err: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (h, w, c) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..6));
        let t = rng.random_range(2..6);
        let samples: Vec<PredictionMap> = (0..t).map(|_| random_map(&mut rng, h, w, c, false)).collect();
        let got = bald_map(&samples).expect("nonempty samples");
        for r in 0..h {
            for col in 0..w {
                let mut mean = vec![0.0; c];
                let mut mean_h = 0.0;
                for s in &samples {
                    let p = pixel(s, r, col);
                    for k in 0..c {
                        mean[k] += p[k] / t as f64;
                    }
                    mean_h += naive_entropy(&p) / t as f64;
                }
                let expect = (naive_entropy(&mean) - mean_h).max(0.0);
                err = err.max((got[[r, col]] - expect).abs());
            }
        }
    }
    Check { name: "BALD", instances: INSTANCES, max_err: err, tol: KERNEL_TOL }
}

pub fn kernel_checks() -> Vec<Check> {
    vec![
        check_entropy(11),
        check_kl_histogram(12),
        check_kl_analytic(13),
        check_pooling(14),
        check_class_distribution(15),
        check_confusion_iou(16),
        check_bald(17),
    ]
}

/// Central differences of `loss` around each coordinate of `params`.
/// Coordinates whose one-sided slopes differ by more than curvature explains
/// sit on a ReLU kink within `FD_EPS`; they come back as `None`. `scale` is
/// the gradient norm the jump is measured against.
fn numeric_gradient(params: &mut [f64], scale: f64, mut loss: impl FnMut(&[f64]) -> f64) -> Vec<Option<f64>> {
    let centre = loss(params);
    (0..params.len())
        .map(|j| {
            let orig = params[j];
            params[j] = orig + FD_EPS;
            let up = loss(params);
            params[j] = orig - FD_EPS;
            let down = loss(params);
            params[j] = orig;
            let (fwd, bwd) = ((up - centre) / FD_EPS, (centre - down) / FD_EPS);
            let kink = (fwd - bwd).abs() > 1e-3 * scale;
            (!kink).then_some((up - down) / (2.0 * FD_EPS))
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - n| / (|a| + |n|)` over the smooth coordinates, as vector norms.
/// Also returns how many coordinates were skipped as kinks.
fn rel_err(analytic: &[f64], numeric: &[Option<f64>]) -> (f64, usize) {
    let (mut diff, mut na, mut nn, mut kinks) = (0.0, 0.0, 0.0, 0);
    for (a, n) in analytic.iter().zip(numeric) {
        match n {
            Some(n) => {
                diff += (a - n).powi(2);
                na += a * a;
                nn += n * n;
            }
            None => kinks += 1,
        }
    }
    let denom = na.sqrt() + nn.sqrt();
    (if denom == 0.0 { 0.0 } else { diff.sqrt() / denom }, kinks)
}

/// At most this share of coordinates may be skipped as kinks.
const MAX_KINK_SHARE: f64 = 0.05;

/// Relative error of one instance; too many kinks count as a failure.
fn instance_error(analytic: &[f64], numeric: &[Option<f64>]) -> f64 {
    let (err, kinks) = rel_err(analytic, numeric);
    if kinks as f64 > MAX_KINK_SHARE * analytic.len() as f64 {
        return f64::INFINITY;
    }
    err
}

/// Finite-difference check of the segmentation learner. Half of the
/// instances run with batch-norm statistics frozen, as during fine-tuning.
pub fn check_learner_gradients(seed: u64) -> Check {
    let mut err: f64 = 0.0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng(seed + i as u64);
        let cfg = LearnerConfig {
            window_radius: 1,
            hidden: vec![6, 5],
            dropout: if i % 3 == 0 { 0.0 } else { 0.3 },
            finetune_freeze_norm: true,
            ..LearnerConfig::default()
        };
        let c = rng.random_range(2..5);
        let mut learner = init_learner(&cfg, c, 2, rng.random()).expect("valid learner");
        if i % 2 == 1 {
            learner.capture_initial();
            assert!(learner.norm_frozen());
        }
        let dim = learner.architecture().input_dim();
        let n = rng.random_range(3..9);
        let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.5..1.5));
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..c) as u8).collect();
        let mask_seed: u64 = rng.random();
        let (_, grad, _) = learner.loss_and_gradient(&x, &y, &mut self::rng(mask_seed)).expect("nonempty batch");

        let mut params = learner.params().to_vec();
        let mut probe = learner.clone();
        let numeric = numeric_gradient(&mut params, norm(&grad), |p| {
            probe.params_mut().copy_from_slice(p);
            probe.batch_loss(&x, &y, &mut self::rng(mask_seed))
        });
        err = err.max(instance_error(&grad, &numeric));
    }
    Check { name: "learner gradient", instances: GRAD_INSTANCES, max_err: err, tol: GRAD_TOL }
}

pub fn layout(kl_bins: usize) -> FeatureLayout {
    FeatureLayout { num_classes: 3, entropy_dim: 3, kl_bins }
}

pub fn random_state(rng: &mut ChaCha8Rng, shape: &QNetShape) -> StateFeatures {
    StateFeatures { values: (0..shape.state_dim()).map(|_| rng.random_range(-1.0..1.0)).collect() }
}

pub fn random_action(rng: &mut ChaCha8Rng, shape: &QNetShape, region: RegionId) -> ActionFeatures {
    ActionFeatures { region, values: (0..shape.layout.action_dim()).map(|_| rng.random_range(-1.0..1.0)).collect() }
}

pub fn small_qnet_config(batch_norm: bool) -> QNetConfig {
    QNetConfig { state_hidden: [7, 6, 5, 4], action_hidden: [5, 4, 3], batch_norm }
}

pub fn check_qnet_gradients(seed: u64) -> Check {
    let mut err: f64 = 0.0;
    for i in 0..GRAD_INSTANCES {
        let mut rng = rng(seed + i as u64);
        let shape = QNetShape { layout: layout(if i % 2 == 0 { 3 } else { 0 }), state_regions: 2 };
        let net = QNet::new(&small_qnet_config(i % 4 != 3), shape, &mut rng).expect("valid net");
        let n = rng.random_range(3..9);
        let states: Vec<StateFeatures> = (0..n).map(|_| random_state(&mut rng, &shape)).collect();
        let actions: Vec<ActionFeatures> =
            (0..n).map(|j| random_action(&mut rng, &shape, RegionId::new(j, 0, 0))).collect();
        let pairs: Vec<(&StateFeatures, &ActionFeatures)> = states.iter().zip(&actions).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, grad) = net.loss_and_gradient(&pairs, &targets).expect("valid batch");

        let mut params = net.params().to_vec();
        let mut probe = net.clone();
        let numeric = numeric_gradient(&mut params, norm(&grad), |p| {
            probe.params_mut().copy_from_slice(p);
            probe.batch_loss(&pairs, &targets).unwrap()
        });
        err = err.max(instance_error(&grad, &numeric));
    }
    Check { name: "Q-network gradient", instances: GRAD_INSTANCES, max_err: err, tol: GRAD_TOL }
}

/// A tiny imbalanced benchmark generator configuration.
pub fn tiny_gen(seed: u64, num_images: usize) -> GenConfig {
    GenConfig {
        num_images,
        height: 16,
        width: 16,
        channels: 3,
        num_classes: 4,
        region_height: 8,
        region_width: 8,
        rare_classes: vec![RareClass { class: 3, frequency: 0.05 }],
        object_size_range: [1.5, 2.5],
        noise_sigma: 0.2,
        signature_overlap: 0.2,
        signature_shift: 0.0,
        signature_seed: 7,
        seed,
        background_cells: 4,
    }
}

/// A run small enough for property suites: 24x24 scenes, nine regions each.
pub fn tiny_run(seed: u64) -> rlseg_core::config::RunConfig {
    use rlseg_core::config::desk;
    use rlseg_core::dataset::SplitSizes;
    use rlseg_core::learner::ConvergenceConfig;
    use rlseg_core::runner::SourceConfig;

    let mut cfg = desk();
    cfg.name = "tiny".into();
    let g = &mut cfg.benchmark.generator;
    g.num_images = 30;
    g.height = 24;
    g.width = 24;
    g.seed = seed;
    cfg.benchmark.splits = SplitSizes { train: 8, eval: 10, reward: 6, state: 2 };
    cfg.benchmark.test_images = 6;
    cfg.benchmark.source = SourceConfig { num_images: 12, signature_shift: 1.0, seed: seed + 100 };
    cfg.learner.hidden = vec![8];
    cfg.learner.batch_size = 128;
    cfg.pretrain = ConvergenceConfig { patience: 2, max_epochs: 6 };
    cfg.features.unlabeled_sample = 20;
    cfg.agent.k = 3;
    cfg.agent.pool_size = 4;
    cfg.agent.batch_size = 4;
    cfg.agent.replay_capacity = 200;
    cfg.agent.target_sync_period = 5;
    cfg.agent.qnet = small_qnet_config(true);
    cfg.policy.budget = 10;
    cfg.policy.episodes = 3;
    cfg.evaluation.budgets = vec![9, 18];
    cfg.evaluation.seeds = vec![0, 1];
    cfg.evaluation.final_training = ConvergenceConfig { patience: 2, max_epochs: 6 };
    for m in &mut cfg.evaluation.methods {
        use rlseg_core::baselines::AcquisitionScorer::*;
        match &mut m.scorer {
            Uniform { pool_size } | Entropy { pool_size } => *pool_size = 12,
            Bald { pool_size, passes } => {
                *pool_size = 12;
                *passes = 4;
            }
            Dqn { pool_size } => *pool_size = 4,
        }
    }
    cfg.validate().expect("tiny config is valid");
    cfg
}

/// Floating-point slack for summing per-step mIoU differences.
pub const TELESCOPING_TOL: f64 = 1e-12;

pub struct EpisodeReport {
    pub episodes: usize,
    pub telescoping_err: f64,
    pub violations: Vec<String>,
}

/// Trains a tiny policy and audits every episode: reward telescoping, budget
/// accounting, pool disjointness and the replay contents.
pub fn check_episodes(seed: u64) -> EpisodeReport {
    use std::collections::BTreeSet;
    use rlseg_core::learner::Segmenter;
    use rlseg_core::report::prepare;
    use rlseg_core::runner::{step_sizes, train_policy};

    let cfg = tiny_run(seed);
    let (bench, theta0) = prepare(&cfg).unwrap();
    let d_t: BTreeSet<RegionId> = bench.data.regions_of(bench.splits.d_t.iter().copied()).into_iter().collect();
    let start = theta0.mean_iou(bench.reward_set()).unwrap();
    let trained = train_policy(&bench, &theta0, &cfg.agent, &cfg.features, &cfg.policy, seed).unwrap();
    let sizes = step_sizes(cfg.policy.budget, cfg.agent.k);
    let mut v = Vec::new();
    let mut tele: f64 = 0.0;
    if trained.episodes.len() != cfg.policy.episodes {
        v.push(format!("{} episodes logged, {} configured", trained.episodes.len(), cfg.policy.episodes));
    }
    for ep in &trained.episodes {
        let e = ep.episode;
        if ep.start_miou != start {
            v.push(format!("episode {e} did not restart from the initial learner"));
        }
        let sum: f64 = ep.steps.iter().map(|s| s.reward).sum();
        tele = tele.max((sum - (ep.end_miou - ep.start_miou)).abs());
        if ep.steps.len() != sizes.len() {
            v.push(format!("episode {e}: {} steps, expected {}", ep.steps.len(), sizes.len()));
        }
        let mut labeled = BTreeSet::new();
        for (step, &size) in ep.steps.iter().zip(&sizes) {
            let t = step.t;
            if step.selected.len() != size || step.pools.len() != size {
                v.push(format!("episode {e} step {t}: {} picks from {} pools, expected {size}", step.selected.len(), step.pools.len()));
            }
            let mut seen = BTreeSet::new();
            for (pool, pick) in step.pools.iter().zip(&step.selected) {
                if !pool.contains(pick) {
                    v.push(format!("episode {e} step {t}: sub-action left its pool"));
                }
                for r in pool {
                    if !seen.insert(*r) {
                        v.push(format!("episode {e} step {t}: pools overlap at {r:?}"));
                    }
                    if !d_t.contains(r) || labeled.contains(r) {
                        v.push(format!("episode {e} step {t}: pool offers {r:?} outside the unlabeled pool"));
                    }
                }
            }
            labeled.extend(step.selected.iter().copied());
            if step.labeled != labeled.len() || step.labeled + step.unlabeled != d_t.len() {
                v.push(format!("episode {e} step {t}: labeled/unlabeled counts drifted"));
            }
        }
        if labeled.len() != cfg.policy.budget {
            v.push(format!("episode {e}: labeled {} regions, budget {}", labeled.len(), cfg.policy.budget));
        }
    }

    // K transitions per step, each paid the scaled step reward, oldest first.
    let replay: Vec<_> = trained.agent.replay().iter().collect();
    let per_episode: usize = sizes.iter().sum();
    if replay.len() != per_episode * cfg.policy.episodes {
        v.push(format!("replay holds {} transitions, expected {}", replay.len(), per_episode * cfg.policy.episodes));
    } else {
        let mut i = 0;
        for ep in &trained.episodes {
            for (t, (step, &size)) in ep.steps.iter().zip(&sizes).enumerate() {
                for tr in &replay[i..i + size] {
                    let terminal = t + 1 == sizes.len();
                    if tr.reward != cfg.policy.reward_scale * step.reward
                        || tr.terminal != terminal
                        || (!terminal && tr.next_pool.is_empty())
                    {
                        v.push(format!("episode {} step {t}: replay transition mismatch", ep.episode));
                    }
                }
                i += size;
            }
        }
    }
    EpisodeReport { episodes: trained.episodes.len(), telescoping_err: tele, violations: v }
}

/// Pushes `1..=cap + extra` and reports whether exactly the newest `cap` remain, in order.
pub fn replay_is_fifo(cap: usize, extra: usize) -> bool {
    use std::sync::Arc;
    use rlseg_core::policy::{ReplayBuffer, Transition};

    let s = Arc::new(StateFeatures { values: vec![] });
    let mut buf = ReplayBuffer::new(cap);
    for i in 1..=cap + extra {
        buf.push(Transition {
            state: Arc::clone(&s),
            chosen: ActionFeatures { region: RegionId::new(i, 0, 0), values: vec![] },
            reward: i as f64,
            next_state: Arc::clone(&s),
            next_pool: Arc::new(Vec::new()),
            terminal: true,
        });
    }
    let got: Vec<f64> = buf.iter().map(|t| t.reward).collect();
    let want: Vec<f64> = (extra + 1..=cap + extra).map(|i| i as f64).collect();
    buf.len() == cap && got == want
}

//! Experiment orchestration.
//!
//! Policy training plays the labeling game on the training pool: every
//! episode restarts the learner from its initial weights, labels `K` regions
//! per step, updates the learner once on them and pays the change in mean IoU
//! on the reward set. Acquisition evaluation then labels the evaluation pool
//! with a frozen policy or a baseline, fine-tunes the initial learner on the
//! acquired regions with early stopping, and scores it on held-out images.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{acquire, AcquisitionScorer, PolicyView};
use crate::dataset::{generate_scenes, split_dataset, GenConfig, RegionId, SceneDataset, SplitSizes, Splits};
use crate::error::{Error, Result};
use crate::featurize::{
    fitted_pool_size, pool_features, sample_pools, state_features, ActionContext, CandidatePool, FeatureConfig, FeatureVariant,
    StateFeatures,
};
use crate::learner::{init_learner, ConvergenceConfig, EvalSet, LearnerConfig, MlpLearner, Segmenter};
use crate::metrics::{distribution_entropy, mean_std};
use crate::policy::{Agent, AgentConfig, QNet, QNetShape, Transition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub num_images: usize,
    /// Signature perturbation relative to the target domain.
    pub signature_shift: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Pool images, split into the four roles.
    pub generator: GenConfig,
    pub splits: SplitSizes,
    pub split_seed: u64,
    /// Held-out images for final scoring, drawn from the same domain.
    pub test_images: usize,
    pub test_seed: u64,
    /// Shifted-domain images used only for pretraining.
    pub source: SourceConfig,
}

/// Generated data for one experiment.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub data: SceneDataset,
    pub splits: Splits,
    pub test: SceneDataset,
    pub source: SceneDataset,
    test_images: Vec<usize>,
}

impl Benchmark {
    pub fn build(config: &BenchmarkConfig) -> Result<Self> {
        let data = generate_scenes(&config.generator)?;
        let splits = split_dataset(&data, config.splits, config.split_seed)?;
        let test = generate_scenes(&GenConfig {
            num_images: config.test_images,
            seed: config.test_seed,
            ..config.generator.clone()
        })?;
        let source = generate_scenes(&GenConfig {
            num_images: config.source.num_images,
            seed: config.source.seed,
            signature_shift: config.source.signature_shift,
            ..config.generator.clone()
        })?;
        let test_images = (0..test.len()).collect();
        Ok(Benchmark { data, splits, test, source, test_images })
    }

    /// Same images with one region per image.
    pub fn full_image(&self) -> Result<Self> {
        Ok(Benchmark {
            data: self.data.with_region_size(self.data.height(), self.data.width())?,
            splits: self.splits.clone(),
            test: self.test.clone(),
            source: self.source.clone(),
            test_images: self.test_images.clone(),
        })
    }

    pub fn reward_set(&self) -> EvalSet<'_> {
        EvalSet { data: &self.data, images: &self.splits.d_r }
    }

    pub fn test_set(&self) -> EvalSet<'_> {
        EvalSet { data: &self.test, images: &self.test_images }
    }

    pub fn region_pixels(&self) -> usize {
        self.data.region_height() * self.data.region_width()
    }
}

/// Trains the initial learner on the source images plus the training pool.
pub fn pretrain(
    bench: &Benchmark,
    config: &LearnerConfig,
    convergence: ConvergenceConfig,
) -> Result<MlpLearner> {
    let d = &bench.data;
    let mut images: Vec<_> = (0..bench.source.len()).map(|i| bench.source.image(i).to_owned()).collect();
    let mut labels: Vec<_> = (0..bench.source.len()).map(|i| bench.source.labels(i).to_owned()).collect();
    for &i in &bench.splits.d_t {
        images.push(d.image(i).to_owned());
        labels.push(d.labels(i).to_owned());
    }
    let combined = SceneDataset::new(d.num_classes(), d.region_height(), d.region_width(), images, labels)?;
    let mut learner = init_learner(config, d.num_classes(), d.channels(), config.seed)?;
    let regions = combined.region_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    learner.train_to_convergence(&combined, &regions, bench.reward_set(), convergence, &mut rng)?;
    learner.capture_initial();
    Ok(learner)
}

/// `mIoU(after) - mIoU(before)` on the reward set.
pub fn compute_reward<L: Segmenter>(before: &L, after: &L, reward: EvalSet<'_>) -> Result<f64> {
    Ok(after.mean_iou(reward)? - before.mean_iou(reward)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyTrainingConfig {
    /// Regions labeled per episode.
    pub budget: usize,
    pub episodes: usize,
    /// Multiplier from mIoU change to reward; 100 pays in mIoU points.
    #[serde(default = "default_reward_scale")]
    pub reward_scale: f64,
}

fn default_reward_scale() -> f64 {
    100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    /// Change in reward-set mIoU; the agent stores it times `reward_scale`.
    pub reward: f64,
    /// Agent loss of the update after this step, if one ran.
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub selected: Vec<RegionId>,
    /// Candidate pools the selection was made from.
    pub pools: Vec<Vec<RegionId>>,
    pub labeled: usize,
    pub unlabeled: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub start_miou: f64,
    pub end_miou: f64,
    pub steps: Vec<StepLog>,
}

impl EpisodeLog {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Sub-actions for each step of a budget: `K` until the remainder.
pub fn step_sizes(budget: usize, k: usize) -> Vec<usize> {
    let mut sizes = vec![k; budget / k];
    if budget % k != 0 {
        sizes.push(budget % k);
    }
    sizes
}

struct Observation {
    state: Arc<StateFeatures>,
    pools: Vec<Arc<CandidatePool>>,
}

fn observe<L: Segmenter>(
    learner: &L,
    bench: &Benchmark,
    features: &FeatureConfig,
    labeled: &[RegionId],
    unlabeled: &[RegionId],
    k: usize,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<Observation> {
    let state = state_features(learner, &bench.data, &bench.splits.d_s, features)?;
    let pools = if k == 0 {
        Vec::new()
    } else {
        let n = fitted_pool_size(n, k, unlabeled.len()).max(1);
        let ids = sample_pools(unlabeled, k, n, rng.next_u64())?;
        let context = ActionContext::build(learner, &bench.data, labeled, unlabeled, features, rng.next_u64())?;
        ids.iter()
            .map(|p| Ok(Arc::new(pool_features(learner, &bench.data, p, &context, features)?)))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(Observation { state: Arc::new(state), pools })
}

/// Plays one episode on the training pool, pushing transitions and updating
/// the agent after every step. `step` counts policy steps across episodes and
/// drives the exploration schedule.
#[allow(clippy::too_many_arguments)]
pub fn run_training_episode<L: Segmenter>(
    bench: &Benchmark,
    learner: &mut L,
    agent: &mut Agent,
    features: &FeatureConfig,
    config: &PolicyTrainingConfig,
    episode: usize,
    step: &mut usize,
    total_steps: usize,
    rng: &mut dyn RngCore,
) -> Result<EpisodeLog> {
    let (k, n) = (agent.config().k, agent.config().pool_size);
    let sizes = step_sizes(config.budget, k);
    learner.reset_to_initial();
    let mut labeled: Vec<RegionId> = Vec::new();
    let mut unlabeled: BTreeSet<RegionId> = bench.data.regions_of(bench.splits.d_t.iter().copied()).into_iter().collect();
    let total_regions = unlabeled.len();
    if total_regions < config.budget {
        return Err(Error::InsufficientRegions { needed: config.budget, available: total_regions });
    }

    let reward_set = bench.reward_set();
    let start_miou = learner.mean_iou(reward_set)?;
    let mut prev_miou = start_miou;
    let unl: Vec<RegionId> = unlabeled.iter().copied().collect();
    let mut obs = observe(learner, bench, features, &labeled, &unl, sizes[0], n, rng)?;
    let mut steps = Vec::with_capacity(sizes.len());

    for (t, _) in sizes.iter().enumerate() {
        let epsilon = agent.config().epsilon(*step, total_steps);
        let pools: Vec<CandidatePool> = obs.pools.iter().map(|p| p.as_ref().clone()).collect();
        let chosen = agent.select(&obs.state, &pools, epsilon)?;
        let new: Vec<RegionId> = chosen.iter().map(|a| a.region).collect();
        for r in &new {
            if !unlabeled.remove(r) {
                return Err(Error::config("episode", format!("region {r:?} selected twice")));
            }
        }
        labeled.extend(&new);
        learner.train_step(&bench.data, &new, rng)?;
        let miou = learner.mean_iou(reward_set)?;
        let reward = miou - prev_miou;
        prev_miou = miou;

        let terminal = t + 1 == sizes.len();
        let next_k = if terminal { 0 } else { sizes[t + 1] };
        let unl: Vec<RegionId> = unlabeled.iter().copied().collect();
        let next = observe(learner, bench, features, &labeled, &unl, next_k, n, rng)?;
        let transitions: Vec<Transition> = chosen
            .into_iter()
            .enumerate()
            .map(|(slot, action)| Transition {
                state: Arc::clone(&obs.state),
                chosen: action,
                reward: config.reward_scale * reward,
                next_state: Arc::clone(&next.state),
                next_pool: if terminal {
                    Arc::new(Vec::new())
                } else {
                    // A shorter final step has fewer slots; wrap around them.
                    Arc::clone(&next.pools[slot % next.pools.len()])
                },
                terminal,
            })
            .collect();
        agent.remember(transitions);
        let loss = agent.update()?;
        *step += 1;

        steps.push(StepLog {
            t,
            reward,
            loss,
            epsilon,
            selected: new,
            pools: obs.pools.iter().map(|p| p.iter().map(|a| a.region).collect()).collect(),
            labeled: labeled.len(),
            unlabeled: unlabeled.len(),
        });
        obs = next;
    }
    Ok(EpisodeLog { episode, start_miou, end_miou: prev_miou, steps })
}

#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    /// Agent after the last episode.
    pub agent: Agent,
    /// Online network of the best greedy-phase episode (or the last one).
    pub best: QNet,
    pub best_episode: Option<usize>,
    pub episodes: Vec<EpisodeLog>,
}

impl TrainedPolicy {
    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.total_reward()).collect()
    }
}

/// Trains a query policy over `episodes` episodes sharing one agent.
///
/// The kept network is the one after the episode with the highest return
/// among episodes played with fully decayed exploration; if there were none,
/// the final network.
pub fn train_policy<L: Segmenter>(
    bench: &Benchmark,
    theta0: &L,
    agent_config: &AgentConfig,
    features: &FeatureConfig,
    config: &PolicyTrainingConfig,
    seed: u64,
) -> Result<TrainedPolicy> {
    features.validate()?;
    let shape = QNetShape {
        layout: features.layout(bench.data.num_classes()),
        state_regions: bench.splits.d_s.len() * bench.data.regions_per_image(),
    };
    let mut agent = Agent::new(&AgentConfig { seed, ..agent_config.clone() }, features, shape)?;
    let mut learner = theta0.clone();
    let steps_per_episode = step_sizes(config.budget, agent_config.k).len();
    let total_steps = steps_per_episode * config.episodes;
    let decay_end = agent_config.epsilon_decay_steps.unwrap_or(total_steps / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut step = 0;
    let mut episodes = Vec::with_capacity(config.episodes);
    let mut best: Option<(f64, usize, QNet)> = None;
    for e in 0..config.episodes {
        let greedy_phase = step >= decay_end;
        let log = run_training_episode(
            bench,
            &mut learner,
            &mut agent,
            features,
            config,
            e,
            &mut step,
            total_steps,
            &mut rng,
        )?;
        let ret = log.total_reward();
        if greedy_phase && best.as_ref().is_none_or(|(b, _, _)| ret > *b) {
            best = Some((ret, e, agent.online().clone()));
        }
        episodes.push(log);
    }
    let (best_episode, best) = match best {
        Some((_, e, net)) => (Some(e), net),
        None => (None, agent.online().clone()),
    };
    Ok(TrainedPolicy { agent, best, best_episode, episodes })
}

/// Outcome of acquisition at one budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetResult {
    pub budget: usize,
    pub labeled: Vec<RegionId>,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    /// Entropy (nats) of the class distribution of labeled pixels.
    pub label_entropy: f64,
    pub class_frequencies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionResult {
    pub rounds: Vec<Vec<RegionId>>,
    pub budgets: Vec<BudgetResult>,
}

/// Class frequencies of the non-VOID pixels in `regions`; zeros when none.
pub fn labeled_class_frequencies(data: &SceneDataset, regions: &[RegionId]) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; data.num_classes()];
    for &r in regions {
        crate::dataset::add_label_counts(&mut counts, data.reveal_labels(r)?.iter().copied());
    }
    Ok(crate::dataset::split::normalize(&counts))
}

/// One acquisition trajectory on the evaluation pool with snapshots at every
/// budget, each followed by convergence training from `theta0` and scoring
/// on the test images.
#[allow(clippy::too_many_arguments)]
pub fn run_acquisition<L: Segmenter>(
    scorer: &AcquisitionScorer,
    bench: &Benchmark,
    theta0: &L,
    policy: Option<(&QNet, &FeatureConfig)>,
    k: usize,
    budgets: &[usize],
    final_training: ConvergenceConfig,
    seed: u64,
) -> Result<AcquisitionResult> {
    if k == 0 {
        return Err(Error::config("k", "must be positive"));
    }
    let mut budgets = budgets.to_vec();
    budgets.sort_unstable();
    budgets.dedup();
    let pool: Vec<RegionId> = bench.data.regions_of(bench.splits.d_v.iter().copied());
    let max_budget = budgets.last().copied().unwrap_or(0);
    if max_budget > pool.len() {
        return Err(Error::InsufficientRegions { needed: max_budget, available: pool.len() });
    }
    let view = policy.map(|(qnet, features)| PolicyView {
        qnet,
        features,
        state_data: &bench.data,
        state_images: &bench.splits.d_s,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut learner = theta0.clone();
    learner.reset_to_initial();
    let mut labeled: Vec<RegionId> = Vec::new();
    let mut unlabeled: BTreeSet<RegionId> = pool.into_iter().collect();
    let mut rounds = Vec::new();
    let mut snapshots: Vec<(usize, Vec<RegionId>)> = Vec::new();
    for &b in &budgets {
        while labeled.len() < b {
            let take = k.min(b - labeled.len());
            let unl: Vec<RegionId> = unlabeled.iter().copied().collect();
            let new = acquire(scorer, &learner, &bench.data, &labeled, &unl, take, view.as_ref(), &mut rng)?;
            for r in &new {
                if !unlabeled.remove(r) {
                    return Err(Error::config("acquisition", format!("region {r:?} selected twice")));
                }
            }
            labeled.extend(&new);
            learner.train_step(&bench.data, &new, &mut rng)?;
            rounds.push(new);
        }
        snapshots.push((b, labeled.clone()));
    }

    let results = snapshots
        .into_iter()
        .map(|(budget, regions)| {
            let mut model = theta0.clone();
            model.reset_to_initial();
            if !regions.is_empty() {
                let mut train_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1_7a1 ^ budget as u64);
                model.train_to_convergence(&bench.data, &regions, bench.reward_set(), final_training, &mut train_rng)?;
            }
            let iou = model.evaluate(bench.test_set())?.mean_iou();
            let freqs = labeled_class_frequencies(&bench.data, &regions)?;
            Ok(BudgetResult {
                budget,
                labeled: regions,
                miou: iou.miou,
                per_class: iou.per_class,
                label_entropy: distribution_entropy(&freqs),
                class_frequencies: freqs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AcquisitionResult { rounds, budgets: results })
}

/// One compared method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub scorer: AcquisitionScorer,
    /// Feature variant for the query policy; defaults to the run's features.
    #[serde(default)]
    pub variant: Option<FeatureVariant>,
    /// Label whole images instead of regions, at the same pixel budget.
    #[serde(default)]
    pub full_image: bool,
}

/// One (method, seed, budget) outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    /// Budget in regions of the region-mode grid (pixel-equivalent for full images).
    pub budget: usize,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub label_entropy: f64,
    pub class_frequencies: Vec<f64>,
}

/// Summary of one policy-training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub method: String,
    pub seed: u64,
    pub returns: Vec<f64>,
    pub best_episode: Option<usize>,
    pub updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionLog {
    pub method: String,
    pub seed: u64,
    pub rounds: Vec<Vec<RegionId>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub records: Vec<RunRecord>,
    pub policies: Vec<PolicyRecord>,
    pub acquisitions: Vec<AcquisitionLog>,
}

impl Comparison {
    /// Population mean and std of mIoU for a method at a budget.
    pub fn miou_stats(&self, method: &str, budget: usize) -> Option<(f64, f64)> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.method == method && r.budget == budget)
            .map(|r| r.miou)
            .collect();
        (!v.is_empty()).then(|| mean_std(&v))
    }

    pub fn entropy_stats(&self, method: &str, budget: usize) -> Option<(f64, f64)> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.method == method && r.budget == budget)
            .map(|r| r.label_entropy)
            .collect();
        (!v.is_empty()).then(|| mean_std(&v))
    }
}

/// Settings shared by every method in a comparison.
#[derive(Clone, Debug)]
pub struct CompareSettings<'a> {
    pub features: &'a FeatureConfig,
    pub agent: &'a AgentConfig,
    pub policy: &'a PolicyTrainingConfig,
    pub budgets: &'a [usize],
    pub final_training: ConvergenceConfig,
}

/// Converts region-mode counts to whole images at equal pixel count.
fn to_full_images(regions: usize, bench: &Benchmark, what: &str) -> Result<usize> {
    let px = regions * bench.region_pixels();
    let image_px = bench.data.height() * bench.data.width();
    if px % image_px != 0 {
        return Err(Error::config(
            what,
            format!("{regions} regions is not a whole number of images in full-image mode"),
        ));
    }
    Ok(px / image_px)
}

fn policy_seed(seed: u64, method: &str) -> u64 {
    // FNV-1a keeps policy streams stable under method reordering.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in method.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    seed ^ h
}

fn run_method<L: Segmenter>(
    bench: &Benchmark,
    full: Option<&Benchmark>,
    theta0: &L,
    method: &MethodSpec,
    seed: u64,
    s: &CompareSettings<'_>,
) -> Result<(Vec<RunRecord>, Option<PolicyRecord>, AcquisitionLog)> {
    let (bench_m, k, budgets, policy_budget) = if method.full_image {
        let f = full.expect("full-image benchmark prepared");
        let k = (s.agent.k * bench.region_pixels()).div_ceil(f.region_pixels()).max(1);
        let budgets = s
            .budgets
            .iter()
            .map(|&b| to_full_images(b, bench, "budgets"))
            .collect::<Result<Vec<_>>>()?;
        let policy_budget = (s.policy.budget * bench.region_pixels()).div_ceil(f.region_pixels());
        (f, k, budgets, policy_budget)
    } else {
        (bench, s.agent.k, s.budgets.to_vec(), s.policy.budget)
    };

    let mut policy_record = None;
    let mut features = s.features.clone();
    if let Some(v) = method.variant {
        features.variant = v;
    }
    let trained = if let AcquisitionScorer::Dqn { .. } = method.scorer {
        let agent_cfg = AgentConfig { k, ..s.agent.clone() };
        let training = PolicyTrainingConfig { budget: policy_budget, ..s.policy.clone() };
        let p = train_policy(bench_m, theta0, &agent_cfg, &features, &training, policy_seed(seed, &method.name))?;
        policy_record = Some(PolicyRecord {
            method: method.name.clone(),
            seed,
            returns: p.returns(),
            best_episode: p.best_episode,
            updates: p.agent.updates(),
        });
        Some(p)
    } else {
        None
    };
    let policy = trained.as_ref().map(|p| (&p.best, &features));
    let result = run_acquisition(&method.scorer, bench_m, theta0, policy, k, &budgets, s.final_training, seed)?;
    let records = result
        .budgets
        .iter()
        .zip(s.budgets.iter().copied().collect::<BTreeSet<_>>())
        .map(|(b, region_budget)| RunRecord {
            method: method.name.clone(),
            seed,
            budget: region_budget,
            miou: b.miou,
            per_class: b.per_class.clone(),
            label_entropy: b.label_entropy,
            class_frequencies: b.class_frequencies.clone(),
        })
        .collect();
    let log = AcquisitionLog { method: method.name.clone(), seed, rounds: result.rounds };
    Ok((records, policy_record, log))
}

/// Runs every (method, seed) pair; results are ordered by method, then seed.
pub fn compare_methods<L: Segmenter>(
    bench: &Benchmark,
    theta0: &L,
    methods: &[MethodSpec],
    seeds: &[u64],
    settings: &CompareSettings<'_>,
) -> Result<Comparison> {
    for m in methods {
        m.scorer.validate()?;
    }
    let full = if methods.iter().any(|m| m.full_image) { Some(bench.full_image()?) } else { None };
    let jobs: Vec<(&MethodSpec, u64)> = methods.iter().flat_map(|m| seeds.iter().map(move |&s| (m, s))).collect();
    let outputs: Vec<Result<_>> = jobs
        .par_iter()
        .map(|&(m, seed)| run_method(bench, full.as_ref(), theta0, m, seed, settings))
        .collect();
    let mut out = Comparison::default();
    for o in outputs {
        let (records, policy, log) = o?;
        out.records.extend(records);
        out.policies.extend(policy);
        out.acquisitions.push(log);
    }
    Ok(out)
}

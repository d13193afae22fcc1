//! Run configuration: one TOML document covering data, learner, features,
//! agent, policy training and evaluation, plus shipped presets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::AcquisitionScorer;
use crate::dataset::{GenConfig, RareClass, SplitSizes};
use crate::error::{Error, Result};
use crate::featurize::{FeatureConfig, FeatureVariant};
use crate::learner::{ConvergenceConfig, LearnerConfig};
use crate::policy::{AgentConfig, QNetConfig};
use crate::runner::{BenchmarkConfig, MethodSpec, PolicyTrainingConfig, SourceConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Labeled-region budgets at which acquisition is scored.
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSpec>,
    pub final_training: ConvergenceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub benchmark: BenchmarkConfig,
    pub learner: LearnerConfig,
    pub pretrain: ConvergenceConfig,
    pub features: FeatureConfig,
    pub agent: AgentConfig,
    pub policy: PolicyTrainingConfig,
    pub evaluation: EvaluationConfig,
    /// Output root; the CLI flag and environment variable take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

pub const PRESETS: [&str; 3] = ["desk", "camvid-analog", "cityscapes-analog"];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string() + &span_hint(text, &e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, reason } => Error::Config { field, reason: format!("{}: {reason}", path.display()) },
            other => other,
        })
    }

    /// Field-level checks run before any compute.
    pub fn validate(&self) -> Result<()> {
        let g = &self.benchmark.generator;
        g.validate()?;
        if self.benchmark.splits.total() > g.num_images {
            return Err(Error::config("benchmark.splits", "split sizes exceed generator.num_images"));
        }
        if self.benchmark.splits.state == 0 || self.benchmark.splits.reward == 0 {
            return Err(Error::config("benchmark.splits", "state and reward sets must be nonempty"));
        }
        if self.benchmark.test_images == 0 {
            return Err(Error::config("benchmark.test_images", "must be positive"));
        }
        if !(self.benchmark.source.signature_shift >= 0.0) {
            return Err(Error::config("benchmark.source.signature_shift", "must be >= 0"));
        }
        self.learner.validate()?;
        self.features.validate()?;
        if self.features.pooled_grid > g.region_height.min(g.region_width) {
            return Err(Error::config("features.pooled_grid", "larger than a region"));
        }
        self.agent.validate()?;
        let regions_per_image = (g.height / g.region_height) * (g.width / g.region_width);
        let train_regions = self.benchmark.splits.train * regions_per_image;
        if self.policy.budget == 0 || self.policy.budget + self.agent.k * self.agent.pool_size > train_regions + self.agent.k {
            return Err(Error::config(
                "policy.budget",
                format!("budget {} with K x N pools does not fit {} training regions", self.policy.budget, train_regions),
            ));
        }
        let eval_regions = self.benchmark.splits.eval * regions_per_image;
        if let Some(&b) = self.evaluation.budgets.iter().max() {
            if b > eval_regions {
                return Err(Error::config("evaluation.budgets", format!("{b} exceeds {eval_regions} evaluation regions")));
            }
        }
        if !(self.policy.reward_scale.is_finite() && self.policy.reward_scale > 0.0) {
            return Err(Error::config("policy.reward_scale", "must be positive and finite"));
        }
        if self.evaluation.seeds.is_empty() {
            return Err(Error::config("evaluation.seeds", "need at least one seed"));
        }
        let mut names: Vec<&str> = self.evaluation.methods.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("evaluation.methods", "method names must be unique"));
        }
        for m in &self.evaluation.methods {
            m.scorer.validate()?;
            if matches!(m.scorer, AcquisitionScorer::Bald { .. }) && self.learner.dropout == 0.0 {
                return Err(Error::config("learner.dropout", "BALD needs a nonzero dropout rate"));
            }
        }
        Ok(())
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(desk()),
            "camvid-analog" => Some(camvid_analog()),
            "cityscapes-analog" => Some(cityscapes_analog()),
            _ => None,
        }
    }
}

fn span_hint(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

fn methods(k: usize, n_dqn: usize, n_u: usize, n_h: usize, n_b: usize) -> Vec<MethodSpec> {
    let m = |name: &str, scorer| MethodSpec { name: name.into(), scorer, variant: None, full_image: false };
    vec![
        m("U", AcquisitionScorer::Uniform { pool_size: k * n_u }),
        m("H", AcquisitionScorer::Entropy { pool_size: k * n_h }),
        m("B", AcquisitionScorer::Bald { pool_size: k * n_b, passes: 20 }),
        m("DQN", AcquisitionScorer::Dqn { pool_size: n_dqn }),
    ]
}

/// The pinned desk-scale benchmark: small imbalanced scenes with two rare
/// classes at about 1% of pixels each.
pub fn desk() -> RunConfig {
    let k = 8;
    let mut evaluation_methods = methods(k, 10, 10, 10, 10);
    evaluation_methods.push(MethodSpec {
        name: "DQN-1H".into(),
        scorer: AcquisitionScorer::Dqn { pool_size: 10 },
        variant: Some(FeatureVariant::OneH),
        full_image: false,
    });
    evaluation_methods.push(MethodSpec {
        name: "DQN-full".into(),
        scorer: AcquisitionScorer::Dqn { pool_size: 10 },
        variant: None,
        full_image: true,
    });
    RunConfig {
        name: "desk".into(),
        benchmark: BenchmarkConfig {
            generator: GenConfig {
                num_images: 200,
                height: 48,
                width: 48,
                channels: 4,
                num_classes: 8,
                region_height: 8,
                region_width: 8,
                rare_classes: vec![
                    RareClass { class: 6, frequency: 0.01 },
                    RareClass { class: 7, frequency: 0.01 },
                ],
                object_size_range: [2.0, 3.5],
                noise_sigma: 0.3,
                signature_overlap: 0.5,
                signature_shift: 0.0,
                signature_seed: 11,
                seed: 1,
                background_cells: 6,
            },
            splits: SplitSizes { train: 10, eval: 158, reward: 30, state: 2 },
            split_seed: 3,
            test_images: 40,
            test_seed: 1001,
            source: SourceConfig { num_images: 120, signature_shift: 1.0, seed: 2002 },
        },
        learner: LearnerConfig {
            window_radius: 1,
            hidden: vec![32],
            dropout: 0.2,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 256,
            seed: 0,
            replay_old_regions: false,
            finetune_freeze_norm: true,
        },
        pretrain: ConvergenceConfig { patience: 5, max_epochs: 40 },
        features: FeatureConfig::default(),
        agent: AgentConfig {
            k,
            pool_size: 10,
            replay_capacity: 600,
            batch_size: 16,
            target_sync_period: 100,
            // Above the large-scale presets: one hundred short episodes give few updates.
            lr: 1e-2,
            weight_decay: 1e-3,
            qnet: QNetConfig { state_hidden: [64, 32, 32, 16], action_hidden: [32, 32, 16], batch_norm: true },
            ..AgentConfig::default()
        },
        policy: PolicyTrainingConfig { budget: 64, episodes: 100, reward_scale: 100.0 },
        evaluation: EvaluationConfig {
            budgets: vec![72],
            seeds: vec![0, 1, 2, 3, 4],
            methods: evaluation_methods,
            final_training: ConvergenceConfig { patience: 5, max_epochs: 60 },
        },
        output: None,
    }
}

/// CamVid-like scale: 24 regions per image, K = 24, pool size 10, replay 600,
/// learning rate 1e-3.
pub fn camvid_analog() -> RunConfig {
    let mut cfg = desk();
    cfg.name = "camvid-analog".into();
    let g = &mut cfg.benchmark.generator;
    g.num_images = 370;
    g.height = 72;
    g.width = 96;
    g.region_height = 18;
    g.region_width = 16;
    g.num_classes = 11;
    g.rare_classes = vec![RareClass { class: 9, frequency: 0.01 }, RareClass { class: 10, frequency: 0.01 }];
    cfg.benchmark.splits = SplitSizes { train: 100, eval: 200, reward: 60, state: 10 };
    cfg.learner.lr = 1e-3;
    cfg.learner.weight_decay = 1e-4;
    cfg.learner.batch_size = 32 * 16;
    cfg.agent.k = 24;
    cfg.agent.pool_size = 10;
    cfg.agent.replay_capacity = 600;
    cfg.agent.lr = 1e-3;
    cfg.agent.weight_decay = 1e-3;
    cfg.policy.budget = 480;
    cfg.evaluation.budgets = vec![480, 960, 1440];
    cfg.evaluation.methods = methods(24, 10, 50, 10, 10);
    cfg
}

/// Cityscapes-like scale: 128 regions per image, K = 256, pool sizes
/// U 500, H 200, B 200, ours 100, replay 3200, learning rate 1e-4.
pub fn cityscapes_analog() -> RunConfig {
    let mut cfg = desk();
    cfg.name = "cityscapes-analog".into();
    let g = &mut cfg.benchmark.generator;
    g.num_images = 2975;
    g.height = 64;
    g.width = 128;
    g.region_height = 8;
    g.region_width = 8;
    g.num_classes = 19;
    g.rare_classes = vec![
        RareClass { class: 16, frequency: 0.005 },
        RareClass { class: 17, frequency: 0.005 },
        RareClass { class: 18, frequency: 0.01 },
    ];
    cfg.benchmark.splits = SplitSizes { train: 250, eval: 2515, reward: 200, state: 10 };
    cfg.learner.lr = 1e-4;
    cfg.learner.weight_decay = 1e-4;
    cfg.learner.batch_size = 16 * 16;
    cfg.agent.k = 256;
    cfg.agent.pool_size = 100;
    cfg.agent.replay_capacity = 3200;
    cfg.agent.lr = 1e-4;
    cfg.agent.weight_decay = 1e-3;
    cfg.policy.budget = 4096;
    cfg.evaluation.budgets = vec![4096, 8192, 12288];
    cfg.evaluation.methods = methods(256, 100, 500, 200, 200);
    cfg
}

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dqn_update, select_subactions, QNet, QNetConfig, QNetShape, ReplayBuffer, Transition};
use crate::error::{Error, Result};
use crate::featurize::{ActionFeatures, CandidatePool, FeatureConfig, StateFeatures};
use crate::nn::Sgd;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Steps over which epsilon decays linearly; `None` means half of all
    /// policy-training steps.
    #[serde(default)]
    pub epsilon_decay_steps: Option<usize>,
    /// Sub-actions (regions labeled) per step.
    pub k: usize,
    /// Candidates per sub-action pool.
    pub pool_size: usize,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Agent updates between hard target-network copies.
    pub target_sync_period: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub qnet: QNetConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: None,
            k: 24,
            pool_size: 10,
            replay_capacity: 600,
            batch_size: 16,
            target_sync_period: 100,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-3,
            seed: 0,
            qnet: QNetConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("agent.gamma", "must lie in [0, 1]"));
        }
        for (name, e) in [("agent.epsilon_start", self.epsilon_start), ("agent.epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        if self.k == 0 || self.pool_size == 0 {
            return Err(Error::config("agent.k", "K and pool size must be positive"));
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.target_sync_period == 0 {
            return Err(Error::config("agent", "batch size, replay capacity and sync period must be positive"));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("agent.lr", "need lr >= 0, momentum in [0, 1), weight decay >= 0"));
        }
        Ok(())
    }

    pub fn sgd(&self) -> Sgd {
        Sgd { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }

    /// Linear decay from start to end, constant afterwards.
    pub fn epsilon(&self, step: usize, total_steps: usize) -> f64 {
        let decay = self.epsilon_decay_steps.unwrap_or(total_steps / 2);
        if decay == 0 {
            return self.epsilon_end;
        }
        let frac = (step as f64 / decay as f64).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Online and target networks, replay memory and update bookkeeping.
#[derive(Clone, Debug)]
pub struct Agent {
    config: AgentConfig,
    features: FeatureConfig,
    online: QNet,
    target: QNet,
    replay: ReplayBuffer,
    updates: usize,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(config: &AgentConfig, features: &FeatureConfig, shape: QNetShape) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let online = QNet::new(&config.qnet, shape, &mut rng)?;
        let target = online.clone();
        Ok(Agent {
            config: config.clone(),
            features: features.clone(),
            online,
            target,
            replay: ReplayBuffer::new(config.replay_capacity),
            updates: 0,
            rng,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.features
    }

    pub fn online(&self) -> &QNet {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut QNet {
        &mut self.online
    }

    pub fn target(&self) -> &QNet {
        &self.target
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn select(&mut self, state: &StateFeatures, pools: &[CandidatePool], epsilon: f64) -> Result<Vec<ActionFeatures>> {
        select_subactions(&self.online, state, pools, epsilon, &mut self.rng)
    }

    pub fn remember(&mut self, transitions: impl IntoIterator<Item = Transition>) {
        self.replay.extend(transitions);
    }

    /// One update when the buffer holds a full batch; `None` otherwise.
    /// Syncs the target network every `target_sync_period` updates.
    pub fn update(&mut self) -> Result<Option<f64>> {
        if self.replay.len() < self.config.batch_size {
            return Ok(None);
        }
        let loss = dqn_update(
            &mut self.online,
            &self.target,
            &self.replay,
            self.config.batch_size,
            self.config.gamma,
            self.config.sgd(),
            &mut self.rng,
        )?;
        self.updates += 1;
        if self.updates % self.config.target_sync_period == 0 {
            self.sync_target();
        }
        Ok(Some(loss))
    }

    pub fn sync_target(&mut self) {
        self.target.copy_weights_from(&self.online);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = AgentCheckpoint {
            magic: *AGENT_MAGIC,
            version: AGENT_VERSION,
            config: self.config.clone(),
            features: self.features.clone(),
            shape: self.online.shape(),
            online: self.online.clone(),
            target: self.target.clone(),
            updates: self.updates,
        };
        let bytes = bincode::serialize(&blob).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

const AGENT_MAGIC: &[u8; 8] = b"RLSEGDQN";
const AGENT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AgentCheckpoint {
    magic: [u8; 8],
    version: u32,
    config: AgentConfig,
    features: FeatureConfig,
    shape: QNetShape,
    online: QNet,
    target: QNet,
    updates: usize,
}

/// Loads a policy checkpoint, refusing one built for different feature widths.
/// The replay buffer is not persisted.
pub fn load_agent(path: &Path, expected: Option<QNetShape>) -> Result<Agent> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let blob: AgentCheckpoint = bincode::deserialize(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    if &blob.magic != AGENT_MAGIC {
        return Err(Error::format(path, "not a policy checkpoint"));
    }
    if blob.version != AGENT_VERSION {
        return Err(Error::Version { found: blob.version, expected: AGENT_VERSION });
    }
    if blob.online.shape() != blob.shape || blob.target.shape() != blob.shape {
        return Err(Error::format(path, "network shapes disagree with the stored fingerprint"));
    }
    if let Some(want) = expected {
        if want != blob.shape {
            return Err(Error::Architecture(format!(
                "policy expects features {:?}, current setup produces {:?}",
                blob.shape, want
            )));
        }
    }
    Ok(Agent {
        rng: ChaCha8Rng::seed_from_u64(blob.config.seed),
        replay: ReplayBuffer::new(blob.config.replay_capacity),
        config: blob.config,
        features: blob.features,
        online: blob.online,
        target: blob.target,
        updates: blob.updates,
    })
}

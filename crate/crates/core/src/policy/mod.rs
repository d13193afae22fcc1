//! The acquisition policy: a batch-mode deep Q-network.
//!
//! Each acquisition step takes `K` sub-actions. Sub-action `k` is restricted
//! to its own candidate pool, so the joint arg-max factorizes into `K`
//! independent arg-maxes over disjoint pools. Every step is stored as `K`
//! transitions sharing the step's reward.

mod agent;
mod qnet;
mod replay;

use std::sync::Arc;

use rand::{Rng, RngCore};

pub use agent::{load_agent, Agent, AgentConfig};
pub use qnet::{QNet, QNetConfig, QNetShape};
pub use replay::ReplayBuffer;

use crate::error::{Error, Result};
use crate::featurize::{ActionFeatures, CandidatePool, StateFeatures};
use crate::nn::Sgd;

/// Anything that scores candidate actions for a state.
pub trait QFunction {
    fn q_values(&self, state: &StateFeatures, actions: &[ActionFeatures]) -> Result<Vec<f64>>;
}

/// One decomposed transition: a single sub-action with the step's reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Arc<StateFeatures>,
    pub chosen: ActionFeatures,
    pub reward: f64,
    pub next_state: Arc<StateFeatures>,
    /// Candidates of the same sub-action slot at the next step.
    pub next_pool: Arc<CandidatePool>,
    pub terminal: bool,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Epsilon-greedy choice of one candidate per pool.
pub fn select_subactions<Q: QFunction + ?Sized>(
    q: &Q,
    state: &StateFeatures,
    pools: &[CandidatePool],
    epsilon: f64,
    rng: &mut dyn RngCore,
) -> Result<Vec<ActionFeatures>> {
    if pools.is_empty() || pools.iter().any(|p| p.is_empty()) {
        return Err(Error::EmptyInput("candidate pool"));
    }
    pools
        .iter()
        .map(|pool| {
            let explore = epsilon > 0.0 && rng.random::<f64>() < epsilon;
            let idx = if explore {
                rng.random_range(0..pool.len())
            } else {
                let values = q.q_values(state, pool)?;
                argmax_first(&values).expect("pool is nonempty")
            };
            Ok(pool[idx].clone())
        })
        .collect()
}

/// TD targets where the target network picks the next action and the online
/// network evaluates it: `y = r + gamma * Q_online(s', argmax_a Q_target(s', a))`.
/// Terminal transitions bootstrap nothing.
pub fn td_targets<O: QFunction + ?Sized, T: QFunction + ?Sized>(
    batch: &[&Transition],
    online: &O,
    target: &T,
    gamma: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("TD batch"));
    }
    batch
        .iter()
        .map(|t| {
            if t.terminal {
                return Ok(t.reward);
            }
            if t.next_pool.is_empty() {
                return Err(Error::MissingNextPool);
            }
            let ranked = target.q_values(&t.next_state, &t.next_pool)?;
            let best = argmax_first(&ranked).expect("nonempty pool");
            let value = online.q_values(&t.next_state, std::slice::from_ref(&t.next_pool[best]))?[0];
            Ok(t.reward + gamma * value)
        })
        .collect()
}

/// One semi-gradient update on a uniform sample from the replay buffer.
/// Returns the pre-step loss.
pub fn dqn_update(
    online: &mut QNet,
    target: &QNet,
    buffer: &ReplayBuffer,
    batch_size: usize,
    gamma: f64,
    sgd: Sgd,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if batch_size == 0 || buffer.len() < batch_size {
        return Err(Error::ReplayUnderfilled { have: buffer.len(), need: batch_size });
    }
    let batch = buffer.sample(batch_size, rng);
    let targets = td_targets(&batch, &*online, target, gamma)?;
    let pairs: Vec<(&StateFeatures, &ActionFeatures)> =
        batch.iter().map(|t| (t.state.as_ref(), &t.chosen)).collect();
    online.train_on(&pairs, &targets, sgd)
}

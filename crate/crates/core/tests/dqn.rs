mod common;

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rlseg_core::dataset::RegionId;
use rlseg_core::featurize::{ActionFeatures, CandidatePool, FeatureConfig, StateFeatures};
use rlseg_core::policy::{
    argmax_first, dqn_update, select_subactions, td_targets, Agent, AgentConfig, QFunction, QNet, QNetShape,
    ReplayBuffer, Transition,
};
use rlseg_core::Result;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::*;

/// Q-values looked up by region.
struct Table(HashMap<RegionId, f64>);

impl QFunction for Table {
    fn q_values(&self, _: &StateFeatures, actions: &[ActionFeatures]) -> Result<Vec<f64>> {
        Ok(actions.iter().map(|a| self.0[&a.region]).collect())
    }
}

/// Scores an action by its first feature component.
struct FirstComponent;

impl QFunction for FirstComponent {
    fn q_values(&self, _: &StateFeatures, actions: &[ActionFeatures]) -> Result<Vec<f64>> {
        Ok(actions.iter().map(|a| a.values[0]).collect())
    }
}

fn region(i: usize) -> RegionId {
    RegionId::new(i, 0, 0)
}

fn action(i: usize, values: Vec<f64>) -> ActionFeatures {
    ActionFeatures { region: region(i), values }
}

fn transition(reward: f64, next_pool: CandidatePool, terminal: bool) -> Transition {
    let s = Arc::new(StateFeatures { values: vec![0.0] });
    Transition {
        state: Arc::clone(&s),
        chosen: action(99, vec![0.0]),
        reward,
        next_state: s,
        next_pool: Arc::new(next_pool),
        terminal,
    }
}

#[test]
fn target_net_selects_and_online_net_evaluates() {
    let (a, b) = (action(0, vec![0.0]), action(1, vec![0.0]));
    let online = Table(HashMap::from([(region(0), 5.0), (region(1), 2.0)]));
    let target = Table(HashMap::from([(region(0), -1.0), (region(1), 7.0)]));
    let t = transition(1.0, vec![a, b], false);
    let y = td_targets(&[&t], &online, &target, 0.5).unwrap();
    assert_eq!(y, vec![2.0]);
    // The opposite pairing would have bootstrapped from A.
    let swapped = td_targets(&[&t], &target, &online, 0.5).unwrap();
    assert_eq!(swapped, vec![0.5]);
}

#[test]
fn terminal_transitions_bootstrap_nothing() {
    let online = Table(HashMap::new());
    let t = transition(0.25, Vec::new(), true);
    assert_eq!(td_targets(&[&t], &online, &online, 0.9).unwrap(), vec![0.25]);
    let missing = transition(0.25, Vec::new(), false);
    assert!(td_targets(&[&missing], &online, &online, 0.9).is_err());
}

fn gated_net(seed: u64, kl_bins: usize) -> (QNet, QNetShape) {
    let shape = QNetShape { layout: layout(kl_bins), state_regions: 2 };
    let net = QNet::new(&small_qnet_config(true), shape, &mut rng(seed)).unwrap();
    (net, shape)
}

#[test]
fn gate_scales_the_score() {
    let (mut net, shape) = gated_net(1, 4);
    let mut r = rng(2);
    let s = random_state(&mut r, &shape);
    let acts: Vec<ActionFeatures> = (0..6).map(|i| random_action(&mut r, &shape, region(i))).collect();
    let pairs: Vec<(&StateFeatures, &ActionFeatures)> = acts.iter().map(|a| (&s, a)).collect();

    // A saturated gate passes the score through unchanged.
    assert!(net.set_gate_constant(40.0));
    let score = net.forward_pairs(&pairs).unwrap();
    assert!(net.set_gate_constant(0.0));
    let half = net.forward_pairs(&pairs).unwrap();
    assert!(net.set_gate_constant(-1e6));
    let closed = net.forward_pairs(&pairs).unwrap();
    for i in 0..acts.len() {
        assert!((half[i] - 0.5 * score[i]).abs() <= 1e-12 * score[i].abs().max(1.0));
        assert!(closed[i].abs() < 1e-4 * score[i].abs());
    }

    let (mut ungated, _) = gated_net(1, 0);
    assert!(!ungated.set_gate_constant(0.0));
}

#[test]
fn batched_forward_matches_single_items() {
    let (net, shape) = gated_net(3, 4);
    let mut r = rng(4);
    let states: Vec<StateFeatures> = (0..16).map(|_| random_state(&mut r, &shape)).collect();
    let acts: Vec<ActionFeatures> = (0..16).map(|i| random_action(&mut r, &shape, region(i))).collect();
    let pairs: Vec<(&StateFeatures, &ActionFeatures)> = states.iter().zip(&acts).collect();
    let batched = net.forward_pairs(&pairs).unwrap();
    for (i, p) in pairs.iter().enumerate() {
        let single = net.forward_pairs(std::slice::from_ref(p)).unwrap()[0];
        assert!((single - batched[i]).abs() < 1e-6);
    }
}

#[test]
fn argmax_survives_a_score_bias_shift_without_gate() {
    let (mut net, shape) = gated_net(5, 0);
    let mut r = rng(6);
    for _ in 0..20 {
        let s = random_state(&mut r, &shape);
        let acts: Vec<ActionFeatures> = (0..8).map(|i| random_action(&mut r, &shape, region(i))).collect();
        let pairs: Vec<(&StateFeatures, &ActionFeatures)> = acts.iter().map(|a| (&s, a)).collect();
        let before = net.forward_pairs(&pairs).unwrap();
        let delta = r.random_range(-10.0..10.0);
        net.shift_score_bias(delta);
        let after = net.forward_pairs(&pairs).unwrap();
        assert_eq!(argmax_first(&before), argmax_first(&after));
        for (b, a) in before.iter().zip(&after) {
            assert!((a - b - delta).abs() < 1e-9);
        }
    }
}

#[test]
fn replay_is_fifo() {
    let (cap, extra) = (7, 4);
    let mut buf = ReplayBuffer::new(cap);
    for i in 1..=cap + extra {
        buf.push(transition(i as f64, Vec::new(), true));
    }
    let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
    let expect: Vec<f64> = (extra + 1..=cap + extra).map(|i| i as f64).collect();
    assert_eq!(rewards, expect);

    let mut big = ReplayBuffer::new(600);
    big.extend((0..601).map(|i| transition(i as f64, Vec::new(), true)));
    assert_eq!(big.len(), 600);
    assert_eq!(big.iter().next().unwrap().reward, 1.0);
}

fn pools(k: usize, n: usize) -> Vec<CandidatePool> {
    (0..k)
        .map(|p| (0..n).map(|i| action(p * n + i, vec![(i * 7 % n) as f64])).collect())
        .collect()
}

#[test]
fn full_exploration_is_uniform_within_each_pool() {
    let (k, n, trials) = (2, 5, 10_000);
    let pools = pools(k, n);
    let s = StateFeatures { values: vec![] };
    let mut counts = vec![vec![0u64; n]; k];
    let mut r = rng(9);
    for _ in 0..trials {
        let chosen = select_subactions(&FirstComponent, &s, &pools, 1.0, &mut r).unwrap();
        for (p, a) in chosen.iter().enumerate() {
            let idx = pools[p].iter().position(|c| c.region == a.region).expect("chosen from its own pool");
            counts[p][idx] += 1;
        }
    }
    let dist = ChiSquared::new((n - 1) as f64).unwrap();
    for c in counts {
        let e = trials as f64 / n as f64;
        let chi2: f64 = c.iter().map(|&v| (v as f64 - e).powi(2) / e).sum();
        assert!(1.0 - dist.cdf(chi2) > 0.01, "chi2 {chi2}");
    }
}

#[test]
fn greedy_selection_takes_the_best_of_each_pool() {
    let pools = pools(3, 6);
    let s = StateFeatures { values: vec![] };
    let chosen = select_subactions(&FirstComponent, &s, &pools, 0.0, &mut rng(0)).unwrap();
    for (pool, a) in pools.iter().zip(&chosen) {
        let best = pool.iter().map(|c| c.values[0]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.values[0], best);
    }
    // Ties go to the first candidate.
    let tied = vec![vec![action(0, vec![1.0]), action(1, vec![1.0])]];
    let chosen = select_subactions(&FirstComponent, &s, &tied, 0.0, &mut rng(0)).unwrap();
    assert_eq!(chosen[0].region, region(0));
    assert!(select_subactions(&FirstComponent, &s, &[vec![]], 0.0, &mut rng(0)).is_err());
}

fn agent_config() -> AgentConfig {
    AgentConfig {
        k: 2,
        pool_size: 3,
        replay_capacity: 50,
        batch_size: 4,
        target_sync_period: 3,
        lr: 1e-2,
        qnet: small_qnet_config(true),
        ..AgentConfig::default()
    }
}

#[test]
fn target_network_syncs_on_schedule() {
    let shape = QNetShape { layout: layout(4), state_regions: 2 };
    let mut agent = Agent::new(&agent_config(), &FeatureConfig::default(), shape).unwrap();
    let mut r = rng(11);
    let s = Arc::new(random_state(&mut r, &shape));
    let pool: CandidatePool = (0..3).map(|i| random_action(&mut r, &shape, region(i))).collect();
    let pool = Arc::new(pool);
    let make = |r: &mut rand_chacha::ChaCha8Rng, i: usize| Transition {
        state: Arc::clone(&s),
        chosen: random_action(r, &shape, region(i)),
        reward: r.random_range(-1.0..1.0),
        next_state: Arc::clone(&s),
        next_pool: Arc::clone(&pool),
        terminal: i % 5 == 0,
    };
    agent.remember((0..3).map(|i| make(&mut r, i)));
    assert_eq!(agent.update().unwrap(), None, "underfilled buffer must not update");
    agent.remember((3..10).map(|i| make(&mut r, i)));

    for u in 1..=6 {
        assert!(agent.update().unwrap().is_some());
        assert_eq!(agent.updates(), u);
        let synced = agent.target().params() == agent.online().params();
        assert_eq!(synced, u % 3 == 0, "after update {u}");
    }
}

#[test]
fn update_requires_a_full_batch() {
    let shape = QNetShape { layout: layout(0), state_regions: 2 };
    let cfg = agent_config();
    let mut online = QNet::new(&cfg.qnet, shape, &mut rng(0)).unwrap();
    let target = online.clone();
    let buf = ReplayBuffer::new(10);
    assert!(dqn_update(&mut online, &target, &buf, 4, 0.9, cfg.sgd(), &mut rng(1)).is_err());
}

#[test]
fn epsilon_decays_linearly_then_holds() {
    let cfg = AgentConfig { epsilon_start: 1.0, epsilon_end: 0.1, epsilon_decay_steps: Some(10), ..agent_config() };
    assert_eq!(cfg.epsilon(0, 100), 1.0);
    assert!((cfg.epsilon(5, 100) - 0.55).abs() < 1e-12);
    assert!((cfg.epsilon(10, 100) - 0.1).abs() < 1e-12);
    assert!((cfg.epsilon(50, 100) - 0.1).abs() < 1e-12);
    let halfway = AgentConfig { epsilon_decay_steps: None, ..cfg };
    assert!((halfway.epsilon(50, 100) - 0.1).abs() < 1e-12);
}

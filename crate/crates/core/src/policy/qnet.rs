//! Gated two-path Q-network.
//!
//! ```text
//! state  -> [BN -> ReLU -> FC] x 4 --\
//!                                     concat -> FC -> score --\
//! action -> [BN -> ReLU -> FC] x 3 --/                         * -> Q
//! KL blocks -> FC -> sigmoid -> gate --------------------------/
//! ```
//!
//! The action path sees the class-distribution and entropy blocks; the KL
//! histograms only drive the gate. Without KL blocks the gate is fixed at 1.

use ndarray::{concatenate, s, Array2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::QFunction;
use crate::error::{Error, Result};
use crate::featurize::{ActionFeatures, FeatureLayout, StateFeatures};
use crate::nn::{Builder, Dense, Mode, Op, Sgd, Stack, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QNetConfig {
    /// Output widths of the four state-path blocks.
    pub state_hidden: [usize; 4],
    /// Output widths of the three action-path blocks.
    pub action_hidden: [usize; 3],
    /// Batch normalization in every block; off gives {ReLU, FC} blocks.
    pub batch_norm: bool,
}

impl Default for QNetConfig {
    fn default() -> Self {
        QNetConfig { state_hidden: [128, 64, 32, 16], action_hidden: [32, 32, 16], batch_norm: true }
    }
}

/// Feature widths a network was built for; checkpoints must match them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QNetShape {
    pub layout: FeatureLayout,
    pub state_regions: usize,
}

impl QNetShape {
    pub fn state_dim(&self) -> usize {
        self.layout.state_dim(self.state_regions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QNet {
    config: QNetConfig,
    shape: QNetShape,
    state_path: Stack,
    action_path: Stack,
    fusion: Dense,
    gate: Option<Dense>,
    params: Vec<f64>,
    stats: Vec<f64>,
    velocity: Vec<f64>,
}

fn path(b: &mut Builder, input: usize, widths: &[usize], batch_norm: bool) -> Stack {
    let mut ops = Vec::new();
    let mut dim = input;
    for &w in widths {
        if batch_norm {
            ops.push(Op::Norm(b.norm(dim)));
        }
        ops.push(Op::Relu);
        ops.push(Op::Dense(b.dense(dim, w)));
        dim = w;
    }
    Stack { ops }
}

/// Inputs of a batch of (state, action) pairs, split by path.
struct Inputs {
    states: Array2<f64>,
    base: Array2<f64>,
    kl: Array2<f64>,
}

struct Forward {
    q: Vec<f64>,
    score: Vec<f64>,
    gate: Vec<f64>,
    fused: Array2<f64>,
    state_tape: Tape,
    action_tape: Tape,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl QNet {
    pub fn new(config: &QNetConfig, shape: QNetShape, rng: &mut dyn RngCore) -> Result<Self> {
        if config.state_hidden.contains(&0) || config.action_hidden.contains(&0) {
            return Err(Error::config("qnet", "hidden widths must be positive"));
        }
        if shape.state_dim() == 0 || shape.layout.region_dim() == 0 {
            return Err(Error::config("qnet", "empty state or action features"));
        }
        let mut b = Builder::default();
        let state_path = path(&mut b, shape.state_dim(), &config.state_hidden, config.batch_norm);
        let action_path = path(&mut b, shape.layout.region_dim(), &config.action_hidden, config.batch_norm);
        let fused = config.state_hidden[3] + config.action_hidden[2];
        let fusion = b.dense(fused, 1);
        let kl = shape.layout.kl_dim();
        let gate = (kl > 0).then(|| b.dense(kl, 1));
        let mut params = vec![0.0; b.param_len()];
        let mut stats = vec![0.0; b.stats_len()];
        state_path.init(&mut params, &mut stats, rng);
        action_path.init(&mut params, &mut stats, rng);
        fusion.init(&mut params, rng);
        if let Some(g) = gate {
            g.init(&mut params, rng);
        }
        Ok(QNet {
            config: config.clone(),
            shape,
            state_path,
            action_path,
            fusion,
            gate,
            velocity: vec![0.0; params.len()],
            params,
            stats,
        })
    }

    pub fn shape(&self) -> QNetShape {
        self.shape
    }

    pub fn config(&self) -> &QNetConfig {
        &self.config
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

    /// Overwrites the gate's affine map with zero weights and the given bias.
    /// Returns false when the network has no gate.
    pub fn set_gate_constant(&mut self, bias: f64) -> bool {
        match self.gate {
            Some(g) => {
                g.weights_mut(&mut self.params).fill(0.0);
                g.bias_mut(&mut self.params)[0] = bias;
                true
            }
            None => false,
        }
    }

    /// Adds `delta` to the bias of the scoring layer.
    pub fn shift_score_bias(&mut self, delta: f64) {
        self.fusion.bias_mut(&mut self.params)[0] += delta;
    }

    /// Hard copy of weights and statistics; momentum buffers are left alone.
    pub fn copy_weights_from(&mut self, other: &QNet) {
        self.params.clone_from(&other.params);
        self.stats.clone_from(&other.stats);
    }

    fn check_state(&self, state: &StateFeatures) -> Result<()> {
        if state.values.len() != self.shape.state_dim() {
            return Err(Error::Dimension {
                context: "state features",
                expected: self.shape.state_dim(),
                actual: state.values.len(),
            });
        }
        Ok(())
    }

    fn check_action(&self, action: &ActionFeatures) -> Result<()> {
        if action.values.len() != self.shape.layout.action_dim() {
            return Err(Error::Dimension {
                context: "action features",
                expected: self.shape.layout.action_dim(),
                actual: action.values.len(),
            });
        }
        Ok(())
    }

    fn inputs<'a>(&self, pairs: impl ExactSizeIterator<Item = (&'a StateFeatures, &'a ActionFeatures)>) -> Result<Inputs> {
        let n = pairs.len();
        let (ds, db, dk) = (self.shape.state_dim(), self.shape.layout.region_dim(), self.shape.layout.kl_dim());
        let mut states = Array2::zeros((n, ds));
        let mut base = Array2::zeros((n, db));
        let mut kl = Array2::zeros((n, dk));
        for (i, (s, a)) in pairs.enumerate() {
            self.check_state(s)?;
            self.check_action(a)?;
            states.row_mut(i).assign(&ndarray::aview1(&s.values));
            base.row_mut(i).assign(&ndarray::aview1(&a.values[..db]));
            kl.row_mut(i).assign(&ndarray::aview1(&a.values[db..]));
        }
        Ok(Inputs { states, base, kl })
    }

    fn gate_values(&self, kl: &Array2<f64>) -> Vec<f64> {
        match self.gate {
            Some(g) => g.forward(&self.params, &kl.view()).column(0).iter().map(|&z| sigmoid(z)).collect(),
            None => vec![1.0; kl.nrows()],
        }
    }

    fn forward(&self, inputs: Inputs, mode: Mode) -> Forward {
        let (hs, state_tape) = self.state_path.forward(&self.params, &self.stats, inputs.states, mode, None);
        let (ha, action_tape) = self.action_path.forward(&self.params, &self.stats, inputs.base, mode, None);
        let fused = concatenate(Axis(1), &[hs.view(), ha.view()]).expect("equal row counts");
        let score: Vec<f64> = self.fusion.forward(&self.params, &fused.view()).column(0).to_vec();
        let gate = self.gate_values(&inputs.kl);
        let q = score.iter().zip(&gate).map(|(s, g)| s * g).collect();
        Forward { q, score, gate, fused, state_tape, action_tape }
    }

    /// Q-values of (state, action) pairs with batch norm in inference mode.
    pub fn forward_pairs(&self, pairs: &[(&StateFeatures, &ActionFeatures)]) -> Result<Vec<f64>> {
        let inputs = self.inputs(pairs.iter().copied())?;
        Ok(self.forward(inputs, Mode::EVAL).q)
    }

    /// Mean squared error against fixed targets and its parameter gradient,
    /// with batch norm in training mode.
    pub fn loss_and_gradient(
        &self,
        pairs: &[(&StateFeatures, &ActionFeatures)],
        targets: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let (loss, grads, _) = self.loss_grad_tapes(pairs, targets)?;
        Ok((loss, grads))
    }

    fn loss_grad_tapes(
        &self,
        pairs: &[(&StateFeatures, &ActionFeatures)],
        targets: &[f64],
    ) -> Result<(f64, Vec<f64>, (Tape, Tape))> {
        if pairs.is_empty() || pairs.len() != targets.len() {
            return Err(Error::Dimension { context: "update batch", expected: pairs.len(), actual: targets.len() });
        }
        let inputs = self.inputs(pairs.iter().copied())?;
        let kl = inputs.kl.clone();
        let f = self.forward(inputs, Mode { batch_stats: true, dropout: false });
        let n = pairs.len() as f64;
        let mut loss = 0.0;
        let mut dscore = Array2::zeros((pairs.len(), 1));
        let mut dgate = Array2::zeros((pairs.len(), 1));
        for i in 0..pairs.len() {
            let err = f.q[i] - targets[i];
            loss += err * err;
            let dq = 2.0 * err / n;
            dscore[[i, 0]] = dq * f.gate[i];
            dgate[[i, 0]] = dq * f.score[i] * f.gate[i] * (1.0 - f.gate[i]);
        }
        loss /= n;

        let mut grads = vec![0.0; self.params.len()];
        let dfused = self.fusion.backward(&self.params, &mut grads, &f.fused.view(), &dscore.view());
        let split = self.config.state_hidden[3];
        self.state_path
            .backward(&self.params, &mut grads, &f.state_tape, dfused.slice(s![.., ..split]).to_owned());
        self.action_path
            .backward(&self.params, &mut grads, &f.action_tape, dfused.slice(s![.., split..]).to_owned());
        if let Some(g) = self.gate {
            g.backward(&self.params, &mut grads, &kl.view(), &dgate.view());
        }
        Ok((loss, grads, (f.state_tape, f.action_tape)))
    }

    /// Training-mode loss only, for finite-difference checks.
    pub fn batch_loss(&self, pairs: &[(&StateFeatures, &ActionFeatures)], targets: &[f64]) -> Result<f64> {
        let inputs = self.inputs(pairs.iter().copied())?;
        let f = self.forward(inputs, Mode { batch_stats: true, dropout: false });
        Ok(f.q.iter().zip(targets).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / targets.len() as f64)
    }

    /// One SGD step on fixed targets; returns the pre-step loss.
    pub fn train_on(&mut self, pairs: &[(&StateFeatures, &ActionFeatures)], targets: &[f64], sgd: Sgd) -> Result<f64> {
        let (loss, grads, (st, at)) = self.loss_grad_tapes(pairs, targets)?;
        self.state_path.update_running_stats(&mut self.stats, &st, pairs.len());
        self.action_path.update_running_stats(&mut self.stats, &at, pairs.len());
        sgd.step(&mut self.params, &grads, &mut self.velocity);
        Ok(loss)
    }
}

impl QFunction for QNet {
    /// Scores every action against one state. Inference-mode batch norm acts
    /// per row, so the state path runs once and is shared.
    fn q_values(&self, state: &StateFeatures, actions: &[ActionFeatures]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        if actions.is_empty() {
            return Ok(Vec::new());
        }
        let s = Array2::from_shape_vec((1, state.values.len()), state.values.clone()).expect("one row");
        let (hs, _) = self.state_path.forward(&self.params, &self.stats, s, Mode::EVAL, None);
        let db = self.shape.layout.region_dim();
        let dk = self.shape.layout.kl_dim();
        let mut base = Array2::zeros((actions.len(), db));
        let mut kl = Array2::zeros((actions.len(), dk));
        for (i, a) in actions.iter().enumerate() {
            self.check_action(a)?;
            base.row_mut(i).assign(&ndarray::aview1(&a.values[..db]));
            kl.row_mut(i).assign(&ndarray::aview1(&a.values[db..]));
        }
        let (ha, _) = self.action_path.forward(&self.params, &self.stats, base, Mode::EVAL, None);
        let hs = hs.broadcast((actions.len(), hs.ncols())).expect("single row broadcasts").to_owned();
        let fused = concatenate(Axis(1), &[hs.view(), ha.view()]).expect("equal row counts");
        let score = self.fusion.forward(&self.params, &fused.view());
        let gate = self.gate_values(&kl);
        Ok(score.column(0).iter().zip(&gate).map(|(s, g)| s * g).collect())
    }
}

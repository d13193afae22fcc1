//! Small dense-network toolkit shared by the segmentation learner and the
//! query network.
//!
//! Trainable parameters of a network live in one flat `Vec<f64>`; layers hold
//! offsets into it. Batch-norm running statistics live in a second flat
//! buffer. That keeps the optimizer, snapshots, checkpoints and finite
//! difference checks trivial: they all operate on plain slices.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Norm {
    pub dim: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Dense(Dense),
    Norm(Norm),
    Relu,
    Dropout(f64),
}

/// Hands out offsets into the parameter and statistics buffers.
#[derive(Debug, Default)]
pub struct Builder {
    params: usize,
    stats: usize,
}

impl Builder {
    pub fn dense(&mut self, input: usize, output: usize) -> Dense {
        let w = self.params;
        let b = w + input * output;
        self.params = b + output;
        Dense { input, output, w, b }
    }

    pub fn norm(&mut self, dim: usize) -> Norm {
        let gamma = self.params;
        let beta = gamma + dim;
        self.params = beta + dim;
        let mean = self.stats;
        let var = mean + dim;
        self.stats = var + dim;
        Norm { dim, gamma, beta, mean, var }
    }

    pub fn param_len(&self) -> usize {
        self.params
    }

    pub fn stats_len(&self) -> usize {
        self.stats
    }
}

impl Dense {
    pub fn weights<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.input, self.output), &params[self.w..self.b]).expect("layout")
    }

    pub fn weights_mut<'a>(&self, params: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.input, self.output), &mut params[self.w..self.b])
            .expect("layout")
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.b..self.b + self.output]
    }

    pub fn bias_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.b..self.b + self.output]
    }

    pub fn init(&self, params: &mut [f64], rng: &mut dyn RngCore) {
        let std = (2.0 / self.input.max(1) as f64).sqrt();
        for v in &mut params[self.w..self.b] {
            let z: f64 = StandardNormal.sample(rng);
            *v = std * z;
        }
        self.bias_mut(params).fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weights(params));
        y += &ArrayView2::from_shape((1, self.output), self.bias(params)).expect("layout");
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
    ) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut self.weights_mut(grads));
        for (g, s) in self.bias_mut(grads).iter_mut().zip(dy.sum_axis(Axis(0))) {
            *g += s;
        }
        dy.dot(&self.weights(params).t())
    }
}

impl Norm {
    fn init(&self, params: &mut [f64], stats: &mut [f64]) {
        params[self.gamma..self.beta].fill(1.0);
        params[self.beta..self.beta + self.dim].fill(0.0);
        stats[self.mean..self.var].fill(0.0);
        stats[self.var..self.var + self.dim].fill(1.0);
    }
}

/// Which behaviour the stochastic and batch-dependent layers follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Batch-norm normalizes with batch statistics (else running statistics).
    pub batch_stats: bool,
    /// Dropout masks are sampled (else dropout is the identity).
    pub dropout: bool,
}

impl Mode {
    pub const EVAL: Mode = Mode { batch_stats: false, dropout: false };
    pub const TRAIN: Mode = Mode { batch_stats: true, dropout: true };
    pub const MC_DROPOUT: Mode = Mode { batch_stats: false, dropout: true };
}

#[derive(Debug)]
enum Cache {
    Dense(Array2<f64>),
    Norm {
        x_hat: Array2<f64>,
        inv_std: Array1<f64>,
        batch: Option<(Array1<f64>, Array1<f64>)>,
    },
    Relu(Array2<f64>),
    Dropout(Option<Array2<f64>>),
}

/// Intermediate values recorded by [`Stack::forward`] for the backward pass.
#[derive(Debug, Default)]
pub struct Tape(Vec<Cache>);

/// A sequence of layers evaluated in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    pub ops: Vec<Op>,
}

impl Stack {
    pub fn init(&self, params: &mut [f64], stats: &mut [f64], rng: &mut dyn RngCore) {
        for op in &self.ops {
            match op {
                Op::Dense(d) => d.init(params, rng),
                Op::Norm(n) => n.init(params, stats),
                Op::Relu | Op::Dropout(_) => {}
            }
        }
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.ops.iter().rev().find_map(|op| match op {
            Op::Dense(d) => Some(d.output),
            _ => None,
        })
    }

    pub fn forward(
        &self,
        params: &[f64],
        stats: &[f64],
        x: Array2<f64>,
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> (Array2<f64>, Tape) {
        let mut tape = Vec::with_capacity(self.ops.len());
        let mut h = x;
        for op in &self.ops {
            match *op {
                Op::Dense(d) => {
                    let y = d.forward(params, &h.view());
                    tape.push(Cache::Dense(h));
                    h = y;
                }
                Op::Norm(n) => {
                    let gamma = &params[n.gamma..n.beta];
                    let beta = &params[n.beta..n.beta + n.dim];
                    let (mean, var, batch) = if mode.batch_stats {
                        let mean = h.mean_axis(Axis(0)).expect("nonempty batch");
                        let var = h.var_axis(Axis(0), 0.0);
                        (mean.clone(), var.clone(), Some((mean, var)))
                    } else {
                        (
                            Array1::from(stats[n.mean..n.var].to_vec()),
                            Array1::from(stats[n.var..n.var + n.dim].to_vec()),
                            None,
                        )
                    };
                    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    let mut x_hat = h;
                    for mut row in x_hat.rows_mut() {
                        for j in 0..n.dim {
                            row[j] = (row[j] - mean[j]) * inv_std[j];
                        }
                    }
                    let mut y = x_hat.clone();
                    for mut row in y.rows_mut() {
                        for j in 0..n.dim {
                            row[j] = gamma[j] * row[j] + beta[j];
                        }
                    }
                    tape.push(Cache::Norm { x_hat, inv_std, batch });
                    h = y;
                }
                Op::Relu => {
                    h.mapv_inplace(|v| v.max(0.0));
                    tape.push(Cache::Relu(h.clone()));
                }
                Op::Dropout(p) => {
                    if mode.dropout && p > 0.0 {
                        let rng = rng.as_deref_mut().expect("dropout needs an rng");
                        let keep = 1.0 / (1.0 - p);
                        let mask = Array2::from_shape_fn(h.dim(), |_| {
                            if rng.random::<f64>() < p {
                                0.0
                            } else {
                                keep
                            }
                        });
                        h *= &mask;
                        tape.push(Cache::Dropout(Some(mask)));
                    } else {
                        tape.push(Cache::Dropout(None));
                    }
                }
            }
        }
        (h, Tape(tape))
    }

    /// Back-propagates `dout`, accumulating into `grads`; returns d(input).
    pub fn backward(&self, params: &[f64], grads: &mut [f64], tape: &Tape, dout: Array2<f64>) -> Array2<f64> {
        let mut d = dout;
        for (op, cache) in self.ops.iter().zip(&tape.0).rev() {
            d = match (op, cache) {
                (Op::Dense(layer), Cache::Dense(x)) => layer.backward(params, grads, &x.view(), &d.view()),
                (Op::Norm(n), Cache::Norm { x_hat, inv_std, batch }) => {
                    let gamma = &params[n.gamma..n.beta];
                    let dgamma = (&d * x_hat).sum_axis(Axis(0));
                    let dbeta = d.sum_axis(Axis(0));
                    for j in 0..n.dim {
                        grads[n.gamma + j] += dgamma[j];
                        grads[n.beta + j] += dbeta[j];
                    }
                    let mut dx_hat = d;
                    for mut row in dx_hat.rows_mut() {
                        for j in 0..n.dim {
                            row[j] *= gamma[j];
                        }
                    }
                    if batch.is_some() {
                        let m = dx_hat.nrows() as f64;
                        let sum_d = dx_hat.sum_axis(Axis(0));
                        let sum_dx = (&dx_hat * x_hat).sum_axis(Axis(0));
                        let mut dx = dx_hat;
                        for (mut row, xh) in dx.rows_mut().into_iter().zip(x_hat.rows()) {
                            for j in 0..n.dim {
                                row[j] = inv_std[j] / m * (m * row[j] - sum_d[j] - xh[j] * sum_dx[j]);
                            }
                        }
                        dx
                    } else {
                        for mut row in dx_hat.rows_mut() {
                            for j in 0..n.dim {
                                row[j] *= inv_std[j];
                            }
                        }
                        dx_hat
                    }
                }
                (Op::Relu, Cache::Relu(y)) => {
                    d.zip_mut_with(y, |g, &v| {
                        if v <= 0.0 {
                            *g = 0.0
                        }
                    });
                    d
                }
                (Op::Dropout(_), Cache::Dropout(mask)) => {
                    if let Some(mask) = mask {
                        d *= mask;
                    }
                    d
                }
                _ => unreachable!("tape does not match stack"),
            };
        }
        d
    }

    /// Folds the batch statistics recorded on `tape` into the running buffers.
    pub fn update_running_stats(&self, stats: &mut [f64], tape: &Tape, batch_size: usize) {
        for (op, cache) in self.ops.iter().zip(&tape.0) {
            if let (Op::Norm(n), Cache::Norm { batch: Some((mean, var)), .. }) = (op, cache) {
                let unbias = if batch_size > 1 {
                    batch_size as f64 / (batch_size as f64 - 1.0)
                } else {
                    1.0
                };
                for j in 0..n.dim {
                    let rm = &mut stats[n.mean + j];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[j];
                    let rv = &mut stats[n.var + j];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[j] * unbias;
                }
            }
        }
    }
}

/// SGD with momentum and L2 weight decay (decay folded into the gradient).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [f64], grads: &[f64], velocity: &mut [f64]) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= self.lr * *v;
        }
    }
}

/// Row-wise softmax, numerically stabilized.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

//! Float-precision MLP (one hidden ReLU layer, scalar output), exact
//! backprop, Adam with a step learning-rate schedule and early stopping.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datakit::{denormalize_targets, Dataset, NormStats};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
}

/// One-hidden-layer regression MLP: y = W2 · relu(W1 x + B1) + B2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// H × D
    pub w1: Vec<Vec<f64>>,
    /// H
    pub b1: Vec<f64>,
    /// 1 × H
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpModel {
    pub fn hidden_size(&self) -> usize {
        self.w1.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w1[0].len()
    }

    /// Hidden pre-activations W1 x + B1.
    pub fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        self.w1
            .iter()
            .zip(&self.b1)
            .map(|(row, &b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let a: Vec<f64> = self.hidden_pre(x).iter().map(|v| v.max(0.0)).collect();
        self.w2.iter().zip(&a).map(|(w, ai)| w * ai).sum::<f64>() + self.b2
    }

    pub(crate) fn param_count(&self) -> usize {
        let (h, d) = (self.hidden_size(), self.input_dim());
        h * d + h + h + 1
    }

    pub(crate) fn flatten(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for row in &self.w1 {
            p.extend_from_slice(row);
        }
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.push(self.b2);
        p
    }

    pub(crate) fn unflatten(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count());
        let d = self.input_dim();
        let mut it = p.iter();
        for row in &mut self.w1 {
            for w in row.iter_mut().take(d) {
                *w = *it.next().unwrap();
            }
        }
        for b in &mut self.b1 {
            *b = *it.next().unwrap();
        }
        for w in &mut self.w2 {
            *w = *it.next().unwrap();
        }
        self.b2 = *it.next().unwrap();
    }
}

/// Uniform fan-in initialization: weights in ±sqrt(1/fan_in), zero biases.
pub fn init_model(d: usize, h: usize, seed: u64) -> MlpModel {
    assert!(d >= 1 && h >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound1 = (1.0 / d as f64).sqrt();
    let bound2 = (1.0 / h as f64).sqrt();
    let w1 = (0..h)
        .map(|_| (0..d).map(|_| rng.gen_range(-bound1..bound1)).collect())
        .collect();
    let w2 = (0..h).map(|_| rng.gen_range(-bound2..bound2)).collect();
    MlpModel { w1, b1: vec![0.0; h], w2, b2: 0.0 }
}

/// Mean of squared residuals.
pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "length mismatch");
    assert!(!pred.is_empty());
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// Gradients of batch MSE with respect to every parameter, flattened in the
/// same order as `MlpModel::flatten`.
pub fn backward(m: &MlpModel, inputs: &[Vec<f64>], targets: &[f64]) -> Vec<f64> {
    assert!(!inputs.is_empty());
    let (h, d) = (m.hidden_size(), m.input_dim());
    let mut gw1 = vec![0.0; h * d];
    let mut gb1 = vec![0.0; h];
    let mut gw2 = vec![0.0; h];
    let mut gb2 = 0.0;
    let scale = 2.0 / inputs.len() as f64;
    for (x, &t) in inputs.iter().zip(targets) {
        let pre = m.hidden_pre(x);
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let y = m.w2.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>() + m.b2;
        let dy = scale * (y - t);
        gb2 += dy;
        for j in 0..h {
            gw2[j] += dy * act[j];
            if pre[j] > 0.0 {
                let da = dy * m.w2[j];
                gb1[j] += da;
                for k in 0..d {
                    gw1[j * d + k] += da * x[k];
                }
            }
        }
    }
    let mut g = gw1;
    g.extend(gb1);
    g.extend(gw2);
    g.push(gb2);
    g
}

/// Adam hyperparameters plus schedule and stopping policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    /// Learning rate is multiplied by `gamma` every `step_size` epochs.
    pub step_size: usize,
    pub gamma: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// 0 means full-batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            learning_rate: 0.001,
            step_size: 3,
            gamma: 0.5,
            max_epochs: 500,
            patience: 20,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.gamma.powi((epoch / self.step_size) as i32)
    }
}

/// Per-epoch loss trace and the early-stopping outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Adam state over a flat parameter vector, with bias correction.
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub(crate) fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Seeded sample order for minibatching: reshuffled every epoch so batches
/// are not contiguous time slices of the series. Contiguous batches make any
/// per-batch statistic (notably activation range observers) chase whichever
/// region of the series the most recent batches covered.
pub(crate) struct BatchPlan {
    order: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchPlan {
    pub(crate) fn new(n: usize, cfg: &TrainConfig) -> Self {
        let bs = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
        Self {
            order: (0..n).collect(),
            batch_size: bs,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB5AD_4ECE_DA1C_E2A9),
        }
    }

    /// Reshuffles and returns the batches for the next epoch.
    pub(crate) fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

pub(crate) fn gather_batch(ds: &Dataset, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let inputs = idx.iter().map(|&i| ds.inputs[i].clone()).collect();
    let targets = idx.iter().map(|&i| ds.targets[i]).collect();
    (inputs, targets)
}

/// Trains with Adam, stepping the LR schedule per epoch, stopping when the
/// validation loss fails to improve for `patience` epochs, and returning the
/// parameters from the best-validation epoch.
pub fn train(
    mut model: MlpModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainHistory), TrainError> {
    assert!(!train_set.is_empty() && !val_set.is_empty());
    let mut params = model.flatten();
    let mut adam = Adam::new(params.len(), cfg);
    let mut plan = BatchPlan::new(train_set.len(), cfg);

    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut bad_epochs = 0usize;

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at_epoch(epoch);
        for batch in plan.next_epoch() {
            model.unflatten(&params);
            let (inputs, targets) = gather_batch(train_set, &batch);
            let grads = backward(&model, &inputs, &targets);
            adam.step(&mut params, &grads, lr);
        }
        model.unflatten(&params);
        let train_pred: Vec<f64> = train_set.inputs.iter().map(|x| model.forward(x)).collect();
        let val_pred: Vec<f64> = val_set.inputs.iter().map(|x| model.forward(x)).collect();
        let tl = mse(&train_pred, &train_set.targets);
        let vl = mse(&val_pred, &val_set.targets);
        if !tl.is_finite() || !vl.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        history.train_loss.push(tl);
        history.val_loss.push(vl);

        if vl < best_val {
            best_val = vl;
            best_params = params.clone();
            history.best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.unflatten(&best_params);
    Ok((model, history))
}

/// MSE of de-normalized predictions against de-normalized targets.
pub fn evaluate_denormalized(m: &MlpModel, test_set: &Dataset, stats: &NormStats) -> f64 {
    let pred: Vec<f64> = test_set.inputs.iter().map(|x| m.forward(x)).collect();
    mse(
        &denormalize_targets(&pred, stats),
        &denormalize_targets(&test_set.targets, stats),
    )
}

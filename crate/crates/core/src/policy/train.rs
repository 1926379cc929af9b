//! Minibatch Adam on mean squared current error.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{self, Batch};
use super::PolicyModel;
use crate::battery::NoiseSpec;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub val_fraction: f64,
    pub seed: u64,
    /// Feature noise injected on every presentation.
    pub noise: NoiseSpec,
    /// Rows per gradient shard; shards are the unit of parallel work.
    pub shard_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            epochs: 100,
            patience: Some(10),
            val_fraction: 0.05,
            seed: 0,
            noise: NoiseSpec::SENSOR,
            shard_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size >= 1
            && self.shard_size >= 1
            && (0.0..1.0).contains(&self.val_fraction)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training config: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean squared error over each epoch's (noisy) training presentations, A^2.
    pub train_loss: Vec<f64>,
    /// Clean validation MSE after each epoch; empty without a validation split.
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

fn shard_ranges(n: usize, shard: usize) -> Vec<(usize, usize)> {
    (0..n).step_by(shard).map(|s| (s, (s + shard).min(n))).collect()
}

/// Sum of squared errors and summed gradient over the batch, computed shard
/// by shard and reduced in shard order.
fn batch_sse_grad(model: &PolicyModel, batch: &Batch, shard: usize, exec: Exec) -> (f64, Vec<f64>) {
    let n = model.num_params();
    let parts = par::map(exec, &shard_ranges(batch.len(), shard), |&(s, e)| {
        let sub = batch.slice(s, e);
        let mut g = vec![0.0; n];
        let sse = network::sse_and_grad(model, &sub, &mut g);
        (sse, g)
    });
    let mut total = 0.0;
    let mut grad = vec![0.0; n];
    for (sse, g) in parts {
        total += sse;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (total, grad)
}

fn batch_sse(model: &PolicyModel, batch: &Batch, shard: usize, exec: Exec) -> f64 {
    par::map(exec, &shard_ranges(batch.len(), shard), |&(s, e)| {
        let sub = batch.slice(s, e);
        network::mse(model, &sub) * sub.len() as f64
    })
    .into_iter()
    .sum()
}

/// Trains `model` in place of a fresh copy. Preprocessing statistics are
/// taken from the model as given. With a validation split, the parameters
/// from the best validation epoch are returned.
pub fn train(
    mut model: PolicyModel,
    data: &Dataset,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(PolicyModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("cannot train on an empty dataset".into()));
    }
    if data.n_w() != model.arch().n_w {
        return Err(Error::WindowMismatch(model.arch().n_w, data.n_w()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if data.len() >= 20 {
        (cfg.val_fraction * data.len() as f64).ceil() as usize
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_batch = (n_val > 0).then(|| {
        Batch::from_rows(model.preprocess(), data, val_idx, &NoiseSpec::ZERO, &mut rng)
    });

    let mut adam = Adam::new(model.num_params(), cfg);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_sse = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch = Batch::from_rows(model.preprocess(), data, chunk, &cfg.noise, &mut rng);
            let (sse, mut grad) = batch_sse_grad(&model, &batch, cfg.shard_size, exec);
            if !sse.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    learning_rate: cfg.learning_rate,
                    detail: format!("batch sse {sse}, {} rows", chunk.len()),
                });
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(model.params_mut(), &grad);
            epoch_sse += sse;
        }
        report.train_loss.push(epoch_sse / train_idx.len() as f64);

        if let Some(vb) = &val_batch {
            let val = batch_sse(&model, vb, cfg.shard_size, exec) / vb.len() as f64;
            if !val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    learning_rate: cfg.learning_rate,
                    detail: format!("validation loss {val}"),
                });
            }
            report.val_loss.push(val);
            if best.as_ref().map_or(true, |(b, _)| val < *b) {
                best = Some((val, model.params().to_vec()));
                report.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    report.stopped_early = true;
                    break;
                }
            }
        } else {
            report.best_epoch = epoch;
        }
    }
    if let Some((_, params)) = best {
        model.params_mut().copy_from_slice(&params);
    }
    Ok((model, report))
}

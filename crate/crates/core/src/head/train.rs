use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward, head_forward, loss_total, Conditioning, DimensionTargets, FeatureSet, HeadError, HeadParams, HeadShape};
use crate::dataset::Dimension;
use crate::rank::{srcc, PairedScores};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub lambda: f64,
    pub seed: u64,
    pub h1: usize,
    pub h2: usize,
    pub conditioning: Conditioning,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            epochs: 10,
            batch_size: 1,
            grad_accum_steps: 16,
            lambda: 1.0,
            seed: 0,
            h1: 512,
            h2: 128,
            conditioning: Conditioning::Instruction,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Cosine-annealed learning rate for optimizer step `step` of `total`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: FeatureSet,
    pub targets: DimensionTargets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation targets or predictions have no spread.
    pub val_srcc: BTreeMap<Dimension, Option<f64>>,
    pub val_mse: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyTrainSet,
    #[error("batch size {0} unsupported; samples are processed one at a time")]
    BatchSize(usize),
    #[error("inconsistent feature width: sample {caption_id} has {got}, expected {expected}")]
    FeatureWidth {
        caption_id: String,
        expected: usize,
        got: usize,
    },
    #[error("loss diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        /// Parameters at the end of the last completed epoch.
        last_good: Box<HeadParams>,
    },
    #[error(transparent)]
    Head(#[from] HeadError),
}

fn feature_width(samples: &[TrainingSample]) -> Result<usize, TrainError> {
    let first = samples[0].features.values().next().map(Vec::len).unwrap_or(0);
    for s in samples {
        for f in s.features.values() {
            if f.len() != first {
                return Err(TrainError::FeatureWidth {
                    caption_id: s.targets.caption_id.clone(),
                    expected: first,
                    got: f.len(),
                });
            }
        }
    }
    Ok(first)
}

pub type PerDimensionSrcc = BTreeMap<Dimension, Option<f64>>;

/// Per-dimension SRCC between predicted and target means, plus the MSE over all pairs.
pub fn evaluate(
    params: &HeadParams,
    samples: &[TrainingSample],
) -> Result<(PerDimensionSrcc, Option<f64>), HeadError> {
    let mut pairs: BTreeMap<Dimension, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let pred = head_forward(params, &s.features)?;
        for d in &pred.dims {
            let e = pairs.entry(d.dimension).or_default();
            e.0.push(d.mu);
            e.1.push(s.targets.scores[&d.dimension]);
        }
    }
    let (mut sq, mut n) = (0.0, 0usize);
    let mut out = BTreeMap::new();
    for (dim, (mu, tgt)) in pairs {
        sq += mu.iter().zip(&tgt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        n += mu.len();
        let rho = PairedScores::from_xy(mu, tgt).ok().and_then(|p| srcc(&p).ok());
        out.insert(dim, rho);
    }
    Ok((out, (n > 0).then(|| sq / n as f64)))
}

/// Train a fresh head.
///
/// Samples are visited one at a time in a seeded shuffled order each epoch.
/// Gradients are averaged over `grad_accum_steps` samples (the last window of
/// an epoch may be shorter) and applied with Adam at the cosine-annealed rate.
pub fn train(train: &[TrainingSample], val: &[TrainingSample], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if cfg.batch_size != 1 {
        return Err(TrainError::BatchSize(cfg.batch_size));
    }
    let width = feature_width(train)?;
    let shape = HeadShape::new(width, cfg.h1, cfg.h2).with_conditioning(cfg.conditioning);
    let mut params = HeadParams::init(shape, cfg.seed);
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params, log });
    }

    let accum = cfg.grad_accum_steps.max(1);
    let steps_per_epoch = train.len().div_ceil(accum);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut adam = Adam::new(params.values().len(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut last_good = params.clone();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut lr = cosine_lr(cfg.lr0, step, total_steps);
        for window in order.chunks(accum) {
            let mut acc = vec![0.0; params.values().len()];
            for &i in window {
                let s = &train[i];
                let (loss, g) = backward(&params, &s.features, &s.targets, cfg.lambda).map_err(|e| match e {
                    HeadError::NonFinite(_) | HeadError::NonFiniteGradient => TrainError::Diverged {
                        epoch,
                        step,
                        last_good: Box::new(last_good.clone()),
                    },
                    other => TrainError::Head(other),
                })?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        step,
                        last_good: Box::new(last_good),
                    });
                }
                epoch_loss += loss;
                for (a, gi) in acc.iter_mut().zip(&g) {
                    *a += gi;
                }
            }
            let scale = 1.0 / window.len() as f64;
            acc.iter_mut().for_each(|a| *a *= scale);
            lr = cosine_lr(cfg.lr0, step, total_steps);
            adam.step(params.values_mut(), &acc, lr);
            step += 1;
        }

        let (val_srcc, val_mse) = if val.is_empty() {
            (BTreeMap::new(), None)
        } else {
            evaluate(&params, val)?
        };
        let entry = EpochLog {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_srcc,
            val_mse,
            lr,
        };
        tracing::debug!(epoch, train_loss = entry.train_loss, lr, "epoch done");
        log.push(entry);
        last_good = params.clone();
    }
    Ok(TrainOutcome { params, log })
}

/// Mean total loss of `params` over `samples`.
pub fn mean_loss(params: &HeadParams, samples: &[TrainingSample], lambda: f64) -> Result<f64, HeadError> {
    let mut total = 0.0;
    for s in samples {
        total += loss_total(&head_forward(params, &s.features)?, &s.targets, lambda)?;
    }
    Ok(total / samples.len() as f64)
}

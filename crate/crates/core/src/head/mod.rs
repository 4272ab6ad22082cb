//! Gaussian scoring head.
//!
//! A three-layer tanh MLP maps one feature vector to `(mu, log sigma^2)`.
//! The same weights are applied to every evaluation dimension of a caption;
//! the dimension reaches the head either through the instruction baked into
//! the extracted feature, or through a one-hot suffix on a shared feature.

mod checkpoint;
mod train;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dimension;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CheckpointMeta, CHECKPOINT_MAGIC};
pub use train::{cosine_lr, evaluate, mean_loss, train, Adam, EpochLog, TrainConfig, TrainError, TrainOutcome, TrainingSample};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 5.0;

/// How the evaluation dimension is presented to the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// One feature per dimension, extracted with the dimension's instruction.
    #[default]
    Instruction,
    /// A single shared feature with a one-hot dimension code appended.
    OneHot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub feature_dim: usize,
    pub h1: usize,
    pub h2: usize,
    #[serde(default)]
    pub conditioning: Conditioning,
}

impl HeadShape {
    pub fn new(feature_dim: usize, h1: usize, h2: usize) -> Self {
        Self {
            feature_dim,
            h1,
            h2,
            conditioning: Conditioning::Instruction,
        }
    }

    pub fn with_conditioning(mut self, conditioning: Conditioning) -> Self {
        self.conditioning = conditioning;
        self
    }

    pub fn input_dim(&self) -> usize {
        match self.conditioning {
            Conditioning::Instruction => self.feature_dim,
            Conditioning::OneHot => self.feature_dim + Dimension::ALL.len(),
        }
    }

    pub fn param_count(&self) -> usize {
        let i = self.input_dim();
        self.h1 * i + self.h1 + self.h2 * self.h1 + self.h2 + 2 * self.h2 + 2
    }

    fn layout(&self) -> Layout {
        let i = self.input_dim();
        let w1 = 0;
        let b1 = w1 + self.h1 * i;
        let w2 = b1 + self.h1;
        let b2 = w2 + self.h2 * self.h1;
        let w3 = b2 + self.h2;
        let b3 = w3 + 2 * self.h2;
        Layout { w1, b1, w2, b2, w3, b3 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

/// Head weights, flattened in layer order:
/// `W1 (h1 x in, row-major), b1, W2 (h2 x h1), b2, W3 (2 x h2), b3`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    shape: HeadShape,
    values: Vec<f64>,
    init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HeadError {
    #[error("feature length {got}, head expects {expected}")]
    FeatureLength { expected: usize, got: usize },
    #[error("dimension mismatch: prediction has {pred:?}, targets have {target:?}")]
    DimensionMismatch {
        pred: Vec<Dimension>,
        target: Vec<Dimension>,
    },
    #[error("no dimensions supplied")]
    NoDimensions,
    #[error("non-finite head output for {0}")]
    NonFinite(Dimension),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("parameter vector has {got} values, shape needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

impl HeadParams {
    /// Fan-in scaled uniform init: every weight and bias of a layer is drawn
    /// from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(shape: HeadShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lay = shape.layout();
        let mut values = vec![0.0; shape.param_count()];
        let fan_ins = [
            (lay.w1, lay.w2, shape.input_dim()),
            (lay.w2, lay.w3, shape.h1),
            (lay.w3, values.len(), shape.h2),
        ];
        for (start, end, fan_in) in fan_ins {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut values[start..end] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Self {
            shape,
            values,
            init_seed: seed,
        }
    }

    pub fn zeros(shape: HeadShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.param_count()],
            init_seed: 0,
        }
    }

    pub fn from_values(shape: HeadShape, values: Vec<f64>, init_seed: u64) -> Result<Self, HeadError> {
        if values.len() != shape.param_count() {
            return Err(HeadError::ParamCount {
                expected: shape.param_count(),
                got: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            init_seed,
        })
    }

    pub fn shape(&self) -> HeadShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    fn input_for(&self, feature: &[f64], dim: Dimension) -> Result<Vec<f64>, HeadError> {
        if feature.len() != self.shape.feature_dim {
            return Err(HeadError::FeatureLength {
                expected: self.shape.feature_dim,
                got: feature.len(),
            });
        }
        let mut x = feature.to_vec();
        if self.shape.conditioning == Conditioning::OneHot {
            let mut code = [0.0; 4];
            code[dim.index()] = 1.0;
            x.extend_from_slice(&code);
        }
        Ok(x)
    }

    fn forward_one(&self, x: Vec<f64>) -> Trace {
        let s = &self.shape;
        let lay = s.layout();
        let w = &self.values;
        let inp = s.input_dim();
        let h1: Vec<f64> = (0..s.h1)
            .map(|j| {
                let row = &w[lay.w1 + j * inp..lay.w1 + (j + 1) * inp];
                (dot(row, &x) + w[lay.b1 + j]).tanh()
            })
            .collect();
        let h2: Vec<f64> = (0..s.h2)
            .map(|j| {
                let row = &w[lay.w2 + j * s.h1..lay.w2 + (j + 1) * s.h1];
                (dot(row, &h1) + w[lay.b2 + j]).tanh()
            })
            .collect();
        let mu = dot(&w[lay.w3..lay.w3 + s.h2], &h2) + w[lay.b3];
        let log_var_raw = dot(&w[lay.w3 + s.h2..lay.w3 + 2 * s.h2], &h2) + w[lay.b3 + 1];
        Trace {
            x,
            h1,
            h2,
            mu,
            log_var_raw,
        }
    }

    fn traces(&self, features: &FeatureSet) -> Result<Vec<(Dimension, Trace)>, HeadError> {
        if features.is_empty() {
            return Err(HeadError::NoDimensions);
        }
        features
            .iter()
            .map(|(&dim, f)| {
                let t = self.forward_one(self.input_for(f, dim)?);
                if !t.mu.is_finite() || !t.log_var_raw.is_finite() {
                    return Err(HeadError::NonFinite(dim));
                }
                Ok((dim, t))
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Trace {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    mu: f64,
    log_var_raw: f64,
}

/// Features for one caption, one vector per evaluation dimension.
pub type FeatureSet = BTreeMap<Dimension, Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimScore {
    pub dimension: Dimension,
    pub mu: f64,
    pub sigma: f64,
    pub log_var: f64,
}

/// Predicted Gaussian per dimension, in normalized [0, 1] score space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub dims: Vec<DimScore>,
    pub mu_agg: f64,
    /// Standard deviation of the mean of the dimension Gaussians.
    pub sigma_agg: f64,
}

impl ScoreDistribution {
    pub fn from_dims(dims: Vec<DimScore>) -> Self {
        let n = dims.len() as f64;
        let mu_agg = dims.iter().map(|d| d.mu).sum::<f64>() / n;
        let sigma_agg = dims.iter().map(|d| d.sigma * d.sigma).sum::<f64>().sqrt() / n;
        Self { dims, mu_agg, sigma_agg }
    }

    pub fn get(&self, dim: Dimension) -> Option<&DimScore> {
        self.dims.iter().find(|d| d.dimension == dim)
    }
}

pub fn clamp_log_var(raw: f64) -> f64 {
    raw.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

pub fn head_forward(params: &HeadParams, features: &FeatureSet) -> Result<ScoreDistribution, HeadError> {
    let dims = params
        .traces(features)?
        .into_iter()
        .map(|(dimension, t)| {
            let log_var = clamp_log_var(t.log_var_raw);
            DimScore {
                dimension,
                mu: t.mu,
                sigma: (0.5 * log_var).exp(),
                log_var,
            }
        })
        .collect();
    Ok(ScoreDistribution::from_dims(dims))
}

/// Ground-truth MOS / 100 for each dimension of one caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionTargets {
    pub caption_id: String,
    pub scores: BTreeMap<Dimension, f64>,
}

impl DimensionTargets {
    pub fn s_agg(&self) -> f64 {
        self.scores.values().sum::<f64>() / self.scores.len() as f64
    }

    fn check(&self, pred: &ScoreDistribution) -> Result<(), HeadError> {
        let mut pd: Vec<Dimension> = pred.dims.iter().map(|d| d.dimension).collect();
        pd.sort();
        let td: Vec<Dimension> = self.scores.keys().copied().collect();
        if pd != td {
            return Err(HeadError::DimensionMismatch { pred: pd, target: td });
        }
        Ok(())
    }
}

/// Mean over dimensions of the Gaussian NLL without its constant term.
pub fn loss_dim(pred: &ScoreDistribution, targets: &DimensionTargets) -> Result<f64, HeadError> {
    targets.check(pred)?;
    let n = pred.dims.len() as f64;
    let total: f64 = pred
        .dims
        .iter()
        .map(|d| {
            let r = targets.scores[&d.dimension] - d.mu;
            r * r / (2.0 * d.sigma * d.sigma) + 0.5 * d.log_var
        })
        .sum();
    Ok(total / n)
}

pub fn loss_agg(pred: &ScoreDistribution, targets: &DimensionTargets) -> Result<f64, HeadError> {
    targets.check(pred)?;
    let r = pred.mu_agg - targets.s_agg();
    Ok(r * r)
}

pub fn loss_total(pred: &ScoreDistribution, targets: &DimensionTargets, lambda: f64) -> Result<f64, HeadError> {
    Ok(loss_dim(pred, targets)? + lambda * loss_agg(pred, targets)?)
}

/// Loss and its exact gradient with respect to every head parameter.
///
/// The log-variance clamp passes gradient only on `[LOG_VAR_MIN, LOG_VAR_MAX]`.
pub fn backward(
    params: &HeadParams,
    features: &FeatureSet,
    targets: &DimensionTargets,
    lambda: f64,
) -> Result<(f64, Vec<f64>), HeadError> {
    let traces = params.traces(features)?;
    let pred = ScoreDistribution::from_dims(
        traces
            .iter()
            .map(|(dimension, t)| {
                let log_var = clamp_log_var(t.log_var_raw);
                DimScore {
                    dimension: *dimension,
                    mu: t.mu,
                    sigma: (0.5 * log_var).exp(),
                    log_var,
                }
            })
            .collect(),
    );
    let loss = loss_total(&pred, targets, lambda)?;

    let s = params.shape;
    let lay = s.layout();
    let inp = s.input_dim();
    let w = &params.values;
    let n = traces.len() as f64;
    let agg_term = lambda * 2.0 * (pred.mu_agg - targets.s_agg()) / n;

    let mut grad = vec![0.0; w.len()];
    let mut d_h2 = vec![0.0; s.h2];
    let mut d_h1 = vec![0.0; s.h1];
    for ((dim, t), d) in traces.iter().zip(&pred.dims) {
        let r = d.mu - targets.scores[dim];
        let var = d.sigma * d.sigma;
        let g_mu = r / var / n + agg_term;
        let g_lv = if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&t.log_var_raw) {
            (0.5 - r * r / (2.0 * var)) / n
        } else {
            0.0
        };
        let g_out = [g_mu, g_lv];

        for (o, &g) in g_out.iter().enumerate() {
            let row = lay.w3 + o * s.h2;
            for j in 0..s.h2 {
                grad[row + j] += g * t.h2[j];
            }
            grad[lay.b3 + o] += g;
        }
        for j in 0..s.h2 {
            let back = g_mu * w[lay.w3 + j] + g_lv * w[lay.w3 + s.h2 + j];
            d_h2[j] = back * (1.0 - t.h2[j] * t.h2[j]);
        }
        d_h1.iter_mut().for_each(|v| *v = 0.0);
        for (j, &da) in d_h2.iter().enumerate() {
            let row = lay.w2 + j * s.h1;
            for k in 0..s.h1 {
                grad[row + k] += da * t.h1[k];
                d_h1[k] += da * w[row + k];
            }
            grad[lay.b2 + j] += da;
        }
        for (k, dh) in d_h1.iter().enumerate() {
            let da = dh * (1.0 - t.h1[k] * t.h1[k]);
            let row = lay.w1 + k * inp;
            for (i, xi) in t.x.iter().enumerate() {
                grad[row + i] += da * xi;
            }
            grad[lay.b1 + k] += da;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(HeadError::NonFiniteGradient);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> HeadShape {
        HeadShape::new(8, 4, 4)
    }

    fn features(seed: u64, dims: &[Dimension], width: usize) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        dims.iter()
            .map(|&d| (d, (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    fn targets(vals: &[(Dimension, f64)]) -> DimensionTargets {
        DimensionTargets {
            caption_id: "c".into(),
            scores: vals.iter().copied().collect(),
        }
    }

    fn dist(vals: &[(Dimension, f64, f64)]) -> ScoreDistribution {
        ScoreDistribution::from_dims(
            vals.iter()
                .map(|&(dimension, mu, sigma)| DimScore {
                    dimension,
                    mu,
                    sigma,
                    log_var: (sigma * sigma).ln(),
                })
                .collect(),
        )
    }

    const SHORT: [Dimension; 3] = [Dimension::Fluency, Dimension::Relevance, Dimension::Conciseness];

    #[test]
    fn zero_weights_give_unit_sigma() {
        let p = HeadParams::zeros(shape());
        let out = head_forward(&p, &features(1, &SHORT, 8)).unwrap();
        for d in &out.dims {
            assert_eq!(d.mu, 0.0);
            assert_eq!(d.sigma, 1.0);
        }
        assert!((out.sigma_agg - 3f64.sqrt() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_features_identical_outputs() {
        let p = HeadParams::init(shape(), 3);
        let f = features(5, &[Dimension::Fluency], 8)[&Dimension::Fluency].clone();
        let fs: FeatureSet = [(Dimension::Fluency, f.clone()), (Dimension::Relevance, f)].into();
        let out = head_forward(&p, &fs).unwrap();
        assert_eq!(out.dims[0].mu, out.dims[1].mu);
        assert_eq!(out.dims[0].sigma, out.dims[1].sigma);
    }

    #[test]
    fn aggregate_mean() {
        let d = dist(&[
            (Dimension::Fluency, 0.2, 1.0),
            (Dimension::Relevance, 0.4, 1.0),
            (Dimension::Conciseness, 0.9, 1.0),
        ]);
        assert!((d.mu_agg - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wrong_feature_length() {
        let p = HeadParams::init(shape(), 3);
        assert_eq!(
            head_forward(&p, &features(1, &SHORT, 7)),
            Err(HeadError::FeatureLength { expected: 8, got: 7 })
        );
        assert_eq!(head_forward(&p, &FeatureSet::new()), Err(HeadError::NoDimensions));
    }

    #[test]
    fn loss_examples() {
        let f = Dimension::Fluency;
        assert_eq!(loss_dim(&dist(&[(f, 0.3, 1.0)]), &targets(&[(f, 0.3)])).unwrap(), 0.0);
        assert_eq!(loss_dim(&dist(&[(f, 0.0, 1.0)]), &targets(&[(f, 1.0)])).unwrap(), 0.5);
        let e = std::f64::consts::E;
        assert!((loss_dim(&dist(&[(f, 0.0, e)]), &targets(&[(f, 0.0)])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(loss_total(&dist(&[(f, 0.0, 1.0)]), &targets(&[(f, 1.0)]), 1.0).unwrap(), 1.5);
    }

    #[test]
    fn aggregate_loss_examples() {
        let three = |m: [f64; 3]| {
            dist(&[
                (SHORT[0], m[0], 1.0),
                (SHORT[1], m[1], 1.0),
                (SHORT[2], m[2], 1.0),
            ])
        };
        let t = |s: [f64; 3]| targets(&[(SHORT[0], s[0]), (SHORT[1], s[1]), (SHORT[2], s[2])]);
        assert_eq!(loss_agg(&three([0.1, 0.2, 0.3]), &t([0.1, 0.2, 0.3])).unwrap(), 0.0);
        assert_eq!(loss_agg(&three([0.0; 3]), &t([1.0; 3])).unwrap(), 1.0);
        assert!(loss_agg(&three([0.2, 0.4, 0.9]), &t([0.5; 3])).unwrap() < 1e-30);
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let d = dist(&[(Dimension::Fluency, 0.0, 1.0)]);
        let t = targets(&[(Dimension::Relevance, 0.0)]);
        assert!(matches!(loss_dim(&d, &t), Err(HeadError::DimensionMismatch { .. })));
    }

    #[test]
    fn lambda_linearity_of_gradient() {
        let p = HeadParams::init(shape(), 9);
        let fs = features(2, &SHORT, 8);
        let t = targets(&[(SHORT[0], 0.2), (SHORT[1], 0.7), (SHORT[2], 0.5)]);
        let g0 = backward(&p, &fs, &t, 0.0).unwrap().1;
        let g1 = backward(&p, &fs, &t, 1.0).unwrap().1;
        let g2 = backward(&p, &fs, &t, 2.0).unwrap().1;
        for i in 0..g0.len() {
            let lhs = g2[i] - g0[i];
            let rhs = 2.0 * (g1[i] - g0[i]);
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()), "{i}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn residual_gradient_vanishes_at_fit() {
        // Zero the log-variance row so only the mean path carries gradient.
        let s = shape();
        let mut p = HeadParams::init(s, 4);
        let lay = s.layout();
        for v in &mut p.values_mut()[lay.w3 + s.h2..lay.w3 + 2 * s.h2] {
            *v = 0.0;
        }
        p.values_mut()[lay.b3 + 1] = 0.0;
        let fs = features(3, &[Dimension::Fluency], 8);
        let mu = head_forward(&p, &fs).unwrap().dims[0].mu;
        let t = targets(&[(Dimension::Fluency, mu)]);
        let (_, g) = backward(&p, &fs, &t, 1.0).unwrap();
        // d/d(b3[0]) is exactly the mean-residual derivative
        assert_eq!(g[lay.b3], 0.0);
        // with sigma = 1 and r = 0 the log-variance derivative is 1/2
        assert_eq!(g[lay.b3 + 1], 0.5);
    }

    #[test]
    fn clamp_bounds_sigma() {
        let s = shape();
        let mut p = HeadParams::zeros(s);
        let lay = s.layout();
        p.values_mut()[lay.b3 + 1] = 1e6;
        let fs = features(1, &[Dimension::Fluency], 8);
        assert_eq!(head_forward(&p, &fs).unwrap().dims[0].sigma, 2.5f64.exp());
        p.values_mut()[lay.b3 + 1] = -1e6;
        assert_eq!(head_forward(&p, &fs).unwrap().dims[0].sigma, (-5.0f64).exp());
        let t = targets(&[(Dimension::Fluency, 0.0)]);
        let (_, g) = backward(&p, &fs, &t, 1.0).unwrap();
        assert_eq!(g[lay.b3 + 1], 0.0);
    }

    #[test]
    fn one_hot_conditioning_widens_input() {
        let s = HeadShape::new(8, 4, 4).with_conditioning(Conditioning::OneHot);
        assert_eq!(s.input_dim(), 12);
        let p = HeadParams::init(s, 1);
        let f = features(5, &[Dimension::Fluency], 8)[&Dimension::Fluency].clone();
        let fs: FeatureSet = [(Dimension::Fluency, f.clone()), (Dimension::Relevance, f)].into();
        let out = head_forward(&p, &fs).unwrap();
        assert_ne!(out.dims[0].mu, out.dims[1].mu);
    }
}

//! Parameter estimation: pooled OLS for linear models and Adam with exact
//! backpropagation for any model under MSE or QLIKE, plus early stopping,
//! hidden-dimension search and ensembling.
//!
//! Adam runs on a rescaled copy of the data (features and targets divided by
//! the mean training target). Every forecaster is positively homogeneous in
//! `(α, V)`, so only `α` changes under the rescaling and is mapped back after
//! training; all other coefficients are scale-free.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SVD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{build_horizon_targets, build_lag_features, RvPanel};
use crate::error::{Error, Result};
use crate::model::{GnnParams, GraphOperators, LinearParams, ModelKind, ModelParams};

pub const DEFAULT_QLIKE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossKind {
    Mse,
    Qlike,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "MSE",
            LossKind::Qlike => "QLIKE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationCriterion {
    pub kind: LossKind,
    /// Predictions are clamped to at least this value inside QLIKE.
    pub qlike_floor: f64,
}

impl EstimationCriterion {
    pub fn mse() -> Self {
        Self {
            kind: LossKind::Mse,
            qlike_floor: DEFAULT_QLIKE_FLOOR,
        }
    }

    pub fn qlike() -> Self {
        Self {
            kind: LossKind::Qlike,
            qlike_floor: DEFAULT_QLIKE_FLOOR,
        }
    }

    /// One-letter tag used in model identifiers (`HAR_M`, `GNNHAR1L_Q`).
    pub fn tag(&self) -> &'static str {
        match self.kind {
            LossKind::Mse => "M",
            LossKind::Qlike => "Q",
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.qlike_floor > 0.0) {
            return Err(Error::InvalidInput(format!(
                "QLIKE floor must be positive, got {}",
                self.qlike_floor
            )));
        }
        Ok(())
    }

    /// Loss of one (actual, predicted) pair and its derivative in the prediction.
    pub fn point(&self, y: f64, p: f64) -> (f64, f64) {
        match self.kind {
            LossKind::Mse => {
                let e = p - y;
                (e * e, 2.0 * e)
            }
            LossKind::Qlike => {
                if p > self.qlike_floor {
                    let r = y / p;
                    (r - r.ln() - 1.0, (1.0 - r) / p)
                } else {
                    let r = y / self.qlike_floor;
                    (r - r.ln() - 1.0, 0.0)
                }
            }
        }
    }

    fn rescaled(&self, factor: f64) -> Self {
        Self {
            qlike_floor: self.qlike_floor * factor,
            ..*self
        }
    }
}

impl FromStr for EstimationCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" | "MSE" | "mse" => Ok(Self::mse()),
            "Q" | "QLIKE" | "qlike" => Ok(Self::qlike()),
            _ => Err(Error::InvalidInput(format!("unknown estimation criterion `{s}`"))),
        }
    }
}

fn check_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "actual is {:?}, predicted is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape("loss of an empty sample".into()));
    }
    Ok(())
}

/// Mean squared error over all (day, asset) cells.
pub fn mse_loss(actual: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(actual, predicted)?;
    let sum: f64 = actual
        .iter()
        .zip(predicted.iter())
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    Ok(sum / actual.len() as f64)
}

/// Mean of `y/ŷ - ln(y/ŷ) - 1` with `ŷ` clamped below at `floor`.
pub fn qlike_loss(actual: &DMatrix<f64>, predicted: &DMatrix<f64>, floor: f64) -> Result<f64> {
    check_same_shape(actual, predicted)?;
    if let Some(y) = actual.iter().find(|y| !(**y > 0.0)) {
        return Err(Error::InvalidInput(format!("QLIKE needs positive actuals, found {y}")));
    }
    let ec = EstimationCriterion {
        kind: LossKind::Qlike,
        qlike_floor: floor,
    };
    ec.check()?;
    let sum: f64 = actual
        .iter()
        .zip(predicted.iter())
        .map(|(y, p)| ec.point(*y, *p).0)
        .sum();
    Ok(sum / actual.len() as f64)
}

/// One training sample: a day's cross-section of lag features and targets,
/// with the graph aggregates of the features precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub origin: usize,
    pub features: DMatrix<f64>,
    pub target: DVector<f64>,
    first_hop: DMatrix<f64>,
    second_hop: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    ops: GraphOperators,
}

impl Dataset {
    pub fn new(features: Vec<(usize, DMatrix<f64>, DVector<f64>)>, ops: GraphOperators) -> Result<Self> {
        let n = ops.n();
        let mut samples = Vec::with_capacity(features.len());
        for (origin, v, y) in features {
            if v.nrows() != n || v.ncols() != 3 || y.len() != n {
                return Err(Error::Shape(format!(
                    "sample at origin {origin}: features {:?}, target {}, graph {n}",
                    v.shape(),
                    y.len()
                )));
            }
            samples.push(Sample {
                origin,
                first_hop: ops.first_hop.matrix() * &v,
                second_hop: ops.second_hop.matrix() * &v,
                features: v,
                target: y,
            });
        }
        Ok(Self { samples, ops })
    }

    /// Samples for every origin in `origins`; the target at origin `t` is
    /// `RV_t + … + RV_{t+h}`, features use rows before `t` only.
    pub fn from_panel(panel: &RvPanel, horizon: usize, origins: Range<usize>, ops: GraphOperators) -> Result<Self> {
        let targets = build_horizon_targets(panel, horizon)?;
        let mut rows = Vec::with_capacity(origins.len());
        for t in origins {
            if t >= targets.values.nrows() {
                return Err(Error::EmptyTarget {
                    horizon,
                    rows: panel.n_days(),
                });
            }
            let v = build_lag_features(panel, t)?;
            rows.push((t, v.matrix, targets.values.row(t).transpose()));
        }
        Self::new(rows, ops)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_assets(&self) -> usize {
        self.ops.n()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn ops(&self) -> &GraphOperators {
        &self.ops
    }

    fn rescaled(&self, factor: f64) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    origin: s.origin,
                    features: &s.features * factor,
                    target: &s.target * factor,
                    first_hop: &s.first_hop * factor,
                    second_hop: &s.second_hop * factor,
                })
                .collect(),
            ops: self.ops.clone(),
        }
    }

    fn mean_target(&self, range: Range<usize>) -> f64 {
        let cells = range.len() * self.n_assets();
        let sum: f64 = self.samples[range].iter().map(|s| s.target.sum()).sum();
        sum / cells as f64
    }
}

/// Chronological train/validation split, as sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub validation: Range<usize>,
}

impl Split {
    fn check(&self, len: usize) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::InvalidInput("training range is empty".into()));
        }
        if self.train.end > len || self.validation.end > len {
            return Err(Error::InvalidInput(format!("split {self:?} exceeds {len} samples")));
        }
        if !self.validation.is_empty() && self.validation.start < self.train.end {
            return Err(Error::InvalidInput("validation must follow the training range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Width of every hidden GNN layer; ignored by linear models.
    pub hidden_dim: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self { kind, hidden_dim: 9 }
    }

    pub fn with_hidden_dim(self, hidden_dim: usize) -> Self {
        Self { hidden_dim, ..self }
    }
}

/// Offsets of each coefficient block in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    kind: ModelKind,
    n: usize,
    dims: Vec<usize>,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec, n_assets: usize) -> Self {
        let dims = match spec.kind {
            ModelKind::Gnnhar { layers } => std::iter::once(3)
                .chain(std::iter::repeat_n(spec.hidden_dim, layers))
                .collect(),
            _ => Vec::new(),
        };
        Self {
            kind: spec.kind,
            n: n_assets,
            dims,
        }
    }

    pub fn of(params: &ModelParams) -> Result<Self> {
        let kind = params.kind()?;
        let n = params.alpha().len();
        let dims = match params {
            ModelParams::Linear(_) => Vec::new(),
            ModelParams::Gnn(p) => {
                p.check_shapes()?;
                std::iter::once(3).chain(p.layers.iter().map(|t| t.ncols())).collect()
            }
        };
        Ok(Self { kind, n, dims })
    }

    pub fn len(&self) -> usize {
        let head = self.n + 3;
        match self.kind {
            ModelKind::Har => head,
            ModelKind::Ghar => head + 3,
            ModelKind::Ghar2Hop => head + 6,
            ModelKind::Gnnhar { .. } => {
                head + self.dims.windows(2).map(|w| w[0] * w[1]).sum::<usize>() + self.dims[self.dims.len() - 1]
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pack(&self, params: &ModelParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(params.alpha().iter());
        out.extend(params.beta());
        match params {
            ModelParams::Linear(p) => {
                out.extend(p.gamma.iter().flatten());
                out.extend(p.delta.iter().flatten());
            }
            ModelParams::Gnn(p) => {
                for t in &p.layers {
                    for r in 0..t.nrows() {
                        out.extend(t.row(r).iter());
                    }
                }
                out.extend(p.gamma.iter());
            }
        }
        out
    }

    pub fn unpack(&self, flat: &[f64]) -> ModelParams {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let n = self.n;
        let alpha = DVector::from_column_slice(&flat[..n]);
        let beta = [flat[n], flat[n + 1], flat[n + 2]];
        let triple = |o: usize| [flat[o], flat[o + 1], flat[o + 2]];
        match self.kind {
            ModelKind::Har => ModelParams::Linear(LinearParams {
                alpha,
                beta,
                gamma: None,
                delta: None,
            }),
            ModelKind::Ghar => ModelParams::Linear(LinearParams {
                alpha,
                beta,
                gamma: Some(triple(n + 3)),
                delta: None,
            }),
            ModelKind::Ghar2Hop => ModelParams::Linear(LinearParams {
                alpha,
                beta,
                gamma: Some(triple(n + 3)),
                delta: Some(triple(n + 6)),
            }),
            ModelKind::Gnnhar { .. } => {
                let mut o = n + 3;
                let mut layers = Vec::with_capacity(self.dims.len() - 1);
                for w in self.dims.windows(2) {
                    layers.push(DMatrix::from_row_slice(w[0], w[1], &flat[o..o + w[0] * w[1]]));
                    o += w[0] * w[1];
                }
                let gamma = DVector::from_column_slice(&flat[o..]);
                ModelParams::Gnn(GnnParams {
                    alpha,
                    beta,
                    layers,
                    gamma,
                })
            }
        }
    }
}

/// Mean criterion loss over the samples at `indices`, and its gradient in the
/// flat layout of [`ParamLayout::of`].
pub fn batch_loss_and_gradient(
    params: &ModelParams,
    data: &Dataset,
    indices: &[usize],
    ec: &EstimationCriterion,
) -> Result<(f64, Vec<f64>)> {
    let layout = ParamLayout::of(params)?;
    if params.alpha().len() != data.n_assets() {
        return Err(Error::Shape(format!(
            "{} intercepts for {} assets",
            params.alpha().len(),
            data.n_assets()
        )));
    }
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grad = vec![0.0; layout.len()];
    let mut loss = 0.0;
    let weight = 1.0 / (indices.len() * data.n_assets()) as f64;
    for &k in indices {
        loss += accumulate_sample(params, &data.samples[k], &data.ops, ec, weight, &mut grad);
    }
    Ok((loss * weight, grad))
}

pub fn batch_loss(params: &ModelParams, data: &Dataset, indices: &[usize], ec: &EstimationCriterion) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut total = 0.0;
    for &k in indices {
        let s = &data.samples[k];
        let pred = predict_sample(params, s, &data.ops)?;
        total += s
            .target
            .iter()
            .zip(pred.iter())
            .map(|(y, p)| ec.point(*y, *p).0)
            .sum::<f64>();
    }
    Ok(total / (indices.len() * data.n_assets()) as f64)
}

fn predict_sample(params: &ModelParams, s: &Sample, ops: &GraphOperators) -> Result<DVector<f64>> {
    match params {
        ModelParams::Linear(p) => {
            let mut out = DVector::from_fn(s.features.nrows(), |i, _| {
                p.alpha[i] + (0..3).map(|k| p.beta[k] * s.features[(i, k)]).sum::<f64>()
            });
            for (coef, agg) in [(p.gamma, &s.first_hop), (p.delta, &s.second_hop)] {
                if let Some(c) = coef {
                    for i in 0..out.len() {
                        out[i] += (0..3).map(|k| c[k] * agg[(i, k)]).sum::<f64>();
                    }
                }
            }
            Ok(out)
        }
        ModelParams::Gnn(_) => params.predict(&s.features, ops),
    }
}

/// Adds `weight * ∂loss/∂θ` for one sample into `grad`; returns the unweighted loss sum.
fn accumulate_sample(
    params: &ModelParams,
    s: &Sample,
    ops: &GraphOperators,
    ec: &EstimationCriterion,
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    let n = s.features.nrows();
    let v = &s.features;
    match params {
        ModelParams::Linear(p) => {
            let pred = predict_sample(params, s, ops).expect("shapes checked by caller");
            let mut loss = 0.0;
            for i in 0..n {
                let (l, d) = ec.point(s.target[i], pred[i]);
                loss += l;
                let g = d * weight;
                grad[i] += g;
                for k in 0..3 {
                    grad[n + k] += g * v[(i, k)];
                }
                if p.gamma.is_some() {
                    for k in 0..3 {
                        grad[n + 3 + k] += g * s.first_hop[(i, k)];
                    }
                }
                if p.delta.is_some() {
                    for k in 0..3 {
                        grad[n + 6 + k] += g * s.second_hop[(i, k)];
                    }
                }
            }
            loss
        }
        ModelParams::Gnn(p) => {
            let w = ops.first_hop.matrix();
            // forward, keeping W·H_l and pre-activations
            let mut inputs = Vec::with_capacity(p.layers.len());
            let mut pre = Vec::with_capacity(p.layers.len());
            let mut h = v.clone();
            for theta in &p.layers {
                let agg = w * &h;
                let z = &agg * theta;
                h = z.map(|x| x.max(0.0));
                inputs.push(agg);
                pre.push(z);
            }
            let mut loss = 0.0;
            let mut g = DVector::zeros(n);
            for i in 0..n {
                let pred = p.alpha[i]
                    + (0..3).map(|k| p.beta[k] * v[(i, k)]).sum::<f64>()
                    + (0..h.ncols()).map(|c| h[(i, c)] * p.gamma[c]).sum::<f64>();
                let (l, d) = ec.point(s.target[i], pred);
                loss += l;
                g[i] = d * weight;
                grad[i] += g[i];
                for k in 0..3 {
                    grad[n + k] += g[i] * v[(i, k)];
                }
            }
            let mut offsets = Vec::with_capacity(p.layers.len());
            let mut o = n + 3;
            for t in &p.layers {
                offsets.push(o);
                o += t.len();
            }
            let gamma_grad = h.transpose() * &g;
            for (c, x) in gamma_grad.iter().enumerate() {
                grad[o + c] += x;
            }
            let mut d_h = &g * p.gamma.transpose();
            for l in (0..p.layers.len()).rev() {
                let d_z = d_h.zip_map(&pre[l], |d, z| if z > 0.0 { d } else { 0.0 });
                let d_theta = inputs[l].transpose() * &d_z;
                let (rows, cols) = d_theta.shape();
                for r in 0..rows {
                    for c in 0..cols {
                        grad[offsets[l] + r * cols + c] += d_theta[(r, c)];
                    }
                }
                if l > 0 {
                    // W is symmetric
                    d_h = w * (d_z * p.layers[l].transpose());
                }
            }
            loss
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size_days: usize,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub ensemble_size: usize,
    pub seed: u64,
    pub hidden_dim_grid: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size_days: 32,
            max_epochs: 500,
            patience_epochs: 10,
            ensemble_size: 10,
            seed: 0,
            hidden_dim_grid: vec![3, 6, 9, 16, 32],
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size_days == 0 {
            out.push("batch_size_days must be at least 1".into());
        }
        if self.max_epochs == 0 {
            out.push("max_epochs must be at least 1".into());
        }
        if self.patience_epochs >= self.max_epochs {
            out.push(format!(
                "patience_epochs ({}) must be below max_epochs ({})",
                self.patience_epochs, self.max_epochs
            ));
        }
        if self.ensemble_size == 0 {
            out.push("ensemble_size must be at least 1".into());
        }
        if self.hidden_dim_grid.contains(&0) {
            out.push("hidden_dim_grid entries must be positive".into());
        }
        out
    }

    fn check(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(v.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub params: ModelParams,
    pub criterion: EstimationCriterion,
    pub training_curve: Vec<EpochLoss>,
    /// Epoch whose parameters were kept (the last epoch when there is no validation range).
    pub best_epoch: usize,
    pub member_id: usize,
}

fn init_params(spec: &ModelSpec, data: &Dataset, train: Range<usize>, rng: &mut ChaCha8Rng) -> ModelParams {
    let n = data.n_assets();
    let days = train.len() as f64;
    let mut alpha = DVector::zeros(n);
    for s in &data.samples[train] {
        alpha += &s.target;
    }
    alpha /= days;
    let beta = [0.33; 3];
    match spec.kind {
        ModelKind::Har => ModelParams::Linear(LinearParams {
            alpha,
            beta,
            gamma: None,
            delta: None,
        }),
        ModelKind::Ghar => ModelParams::Linear(LinearParams {
            alpha,
            beta,
            gamma: Some([0.0; 3]),
            delta: None,
        }),
        ModelKind::Ghar2Hop => ModelParams::Linear(LinearParams {
            alpha,
            beta,
            gamma: Some([0.0; 3]),
            delta: Some([0.0; 3]),
        }),
        ModelKind::Gnnhar { layers } => {
            let mut uniform = |rows: usize, cols: usize| {
                let bound = 1.0 / (rows as f64).sqrt();
                DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
            };
            let mut mats = Vec::with_capacity(layers);
            let mut d = 3;
            for _ in 0..layers {
                mats.push(uniform(d, spec.hidden_dim));
                d = spec.hidden_dim;
            }
            let gamma = uniform(d, 1).column(0).into_owned();
            ModelParams::Gnn(GnnParams {
                alpha,
                beta,
                layers: mats,
                gamma,
            })
        }
    }
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for k in 0..theta.len() {
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * grad[k];
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * grad[k] * grad[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            theta[k] -= self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

fn unscale_alpha(params: ModelParams, scale: f64) -> ModelParams {
    match params {
        ModelParams::Linear(mut p) => {
            p.alpha *= scale;
            ModelParams::Linear(p)
        }
        ModelParams::Gnn(mut p) => {
            p.alpha *= scale;
            ModelParams::Gnn(p)
        }
    }
}

/// Shared Adam loop. With an empty validation range it runs exactly
/// `epoch_budget` epochs and keeps the final parameters.
fn run_adam(
    spec: &ModelSpec,
    data: &Dataset,
    split: &Split,
    ec: &EstimationCriterion,
    cfg: &TrainConfig,
    epoch_budget: usize,
) -> Result<FittedModel> {
    ec.check()?;
    cfg.check()?;
    split.check(data.len())?;
    if let ModelKind::Gnnhar { layers } = spec.kind {
        if layers == 0 || spec.hidden_dim == 0 {
            return Err(Error::InvalidInput(format!(
                "GNNHAR needs positive layers and width, got {layers} and {}",
                spec.hidden_dim
            )));
        }
    }
    let mut scale = data.mean_target(split.train.clone());
    if !(scale > 0.0) || !scale.is_finite() {
        scale = 1.0;
    }
    let scaled = data.rescaled(1.0 / scale);
    let scaled_ec = ec.rescaled(1.0 / scale);
    // reported losses are in the original units
    let unit = match ec.kind {
        LossKind::Mse => scale * scale,
        LossKind::Qlike => 1.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = init_params(spec, &scaled, split.train.clone(), &mut rng);
    let layout = ParamLayout::of(&init)?;
    let mut theta = layout.pack(&init);
    let mut adam = Adam::new(cfg.learning_rate, theta.len());
    let mut order: Vec<usize> = split.train.clone().collect();
    let val: Vec<usize> = split.validation.clone().collect();
    let early_stopping = !val.is_empty();

    let mut curve = Vec::new();
    let mut best = (f64::INFINITY, theta.clone(), 0usize);
    let mut since_best = 0;
    for epoch in 1..=epoch_budget {
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(cfg.batch_size_days).enumerate() {
            let params = layout.unpack(&theta);
            let (loss, grad) = batch_loss_and_gradient(&params, &scaled, batch, &scaled_ec)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::DivergedTraining { epoch, step });
            }
            adam.step(&mut theta, &grad);
        }
        let params = layout.unpack(&theta);
        let all_train: Vec<usize> = split.train.clone().collect();
        let train_loss = batch_loss(&params, &scaled, &all_train, &scaled_ec)? * unit;
        let val_loss = if early_stopping {
            Some(batch_loss(&params, &scaled, &val, &scaled_ec)? * unit)
        } else {
            None
        };
        if !train_loss.is_finite() || val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::DivergedTraining {
                epoch,
                step: order.len().div_ceil(cfg.batch_size_days),
            });
        }
        curve.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        match val_loss {
            Some(v) if v < best.0 => {
                best = (v, theta.clone(), epoch);
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best >= cfg.patience_epochs {
                    break;
                }
            }
            None => best = (train_loss, theta.clone(), epoch),
        }
    }
    let params = unscale_alpha(layout.unpack(&best.1), scale);
    Ok(FittedModel {
        params,
        criterion: *ec,
        training_curve: curve,
        best_epoch: best.2,
        member_id: 0,
    })
}

/// Mini-batch Adam with early stopping on the validation loss; returns the
/// parameters of the best validation epoch. An empty validation range runs
/// all `max_epochs` and returns the final iterate.
pub fn adam_fit(
    spec: &ModelSpec,
    data: &Dataset,
    split: &Split,
    ec: &EstimationCriterion,
    cfg: &TrainConfig,
) -> Result<FittedModel> {
    run_adam(spec, data, split, ec, cfg, cfg.max_epochs)
}

/// Adam on `train` for exactly `epochs` epochs, with no validation.
pub fn fixed_epoch_fit(
    spec: &ModelSpec,
    data: &Dataset,
    train: Range<usize>,
    epochs: usize,
    ec: &EstimationCriterion,
    cfg: &TrainConfig,
) -> Result<FittedModel> {
    if epochs == 0 {
        return Err(Error::InvalidInput("epoch budget must be at least 1".into()));
    }
    let split = Split {
        validation: train.end..train.end,
        train,
    };
    run_adam(spec, data, &split, ec, cfg, epochs)
}

/// Members trained with seeds `seed, seed+1, …`; forecasts are member averages.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<FittedModel>,
}

impl Ensemble {
    pub fn predict(&self, v: &DMatrix<f64>, ops: &GraphOperators) -> Result<DVector<f64>> {
        let mut sum = DVector::zeros(v.nrows());
        for m in &self.members {
            sum += m.params.predict(v, ops)?;
        }
        Ok(sum / self.members.len() as f64)
    }

    /// Member-averaged final hidden representation; `None` for linear models.
    pub fn hidden(&self, v: &DMatrix<f64>, ops: &GraphOperators) -> Result<Option<DMatrix<f64>>> {
        let mut acc: Option<DMatrix<f64>> = None;
        for m in &self.members {
            let ModelParams::Gnn(p) = &m.params else {
                return Ok(None);
            };
            let h = crate::model::gnnhar_hidden(v, &ops.first_hop, p)?;
            match &mut acc {
                Some(a) if a.shape() == h.shape() => *a += h,
                Some(_) => return Err(Error::Shape("ensemble members have different widths".into())),
                None => acc = Some(h),
            }
        }
        Ok(acc.map(|a| a / self.members.len() as f64))
    }

    /// Mean of the members' best validation losses.
    pub fn mean_validation_loss(&self) -> Option<f64> {
        let mut total = 0.0;
        for m in &self.members {
            total += m.training_curve.iter().find(|e| e.epoch == m.best_epoch)?.val_loss?;
        }
        Some(total / self.members.len() as f64)
    }
}

fn member_config(cfg: &TrainConfig, k: usize) -> TrainConfig {
    TrainConfig {
        seed: cfg.seed.wrapping_add(k as u64),
        ..cfg.clone()
    }
}

pub fn ensemble_fit(
    spec: &ModelSpec,
    data: &Dataset,
    split: &Split,
    ec: &EstimationCriterion,
    cfg: &TrainConfig,
) -> Result<Ensemble> {
    cfg.check()?;
    let members: Vec<Result<FittedModel>> = (0..cfg.ensemble_size)
        .into_par_iter()
        .map(|k| {
            let mut m = adam_fit(spec, data, split, ec, &member_config(cfg, k))?;
            m.member_id = k;
            Ok(m)
        })
        .collect();
    Ok(Ensemble {
        members: members.into_iter().collect::<Result<_>>()?,
    })
}

/// Ensemble trained on train ∪ validation for a fixed number of epochs: the
/// median best epoch of a preliminary early-stopped ensemble on `split`.
pub fn budgeted_ensemble_fit(
    spec: &ModelSpec,
    data: &Dataset,
    split: &Split,
    ec: &EstimationCriterion,
    cfg: &TrainConfig,
) -> Result<(Ensemble, usize)> {
    let prelim = ensemble_fit(spec, data, split, ec, cfg)?;
    let mut epochs: Vec<usize> = prelim.members.iter().map(|m| m.best_epoch).collect();
    epochs.sort_unstable();
    let budget = epochs[(epochs.len() - 1) / 2].max(1);
    let full = split.train.start..split.validation.end.max(split.train.end);
    let members: Vec<Result<FittedModel>> = (0..cfg.ensemble_size)
        .into_par_iter()
        .map(|k| {
            let mut m = fixed_epoch_fit(spec, data, full.clone(), budget, ec, &member_config(cfg, k))?;
            m.member_id = k;
            Ok(m)
        })
        .collect();
    Ok((
        Ensemble {
            members: members.into_iter().collect::<Result<_>>()?,
        },
        budget,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub best_dim: usize,
    /// (hidden dimension, mean validation loss) per grid value.
    pub table: Vec<(usize, f64)>,
    /// The ensemble trained at `best_dim`.
    pub best: Ensemble,
}

/// Trains one ensemble per grid value and keeps the dimension with the lowest
/// mean validation loss (ties go to the smaller dimension).
pub fn grid_search_hidden_dim(
    spec: &ModelSpec,
    data: &Dataset,
    split: &Split,
    ec: &EstimationCriterion,
    cfg: &TrainConfig,
) -> Result<GridSearchResult> {
    if cfg.hidden_dim_grid.is_empty() {
        return Err(Error::InvalidInput("hidden dimension grid is empty".into()));
    }
    let mut table = Vec::with_capacity(cfg.hidden_dim_grid.len());
    let mut best: Option<(usize, f64, Ensemble)> = None;
    for &d in &cfg.hidden_dim_grid {
        let ens = ensemble_fit(&spec.with_hidden_dim(d), data, split, ec, cfg)?;
        let loss = ens
            .mean_validation_loss()
            .ok_or_else(|| Error::Degenerate("ensemble has no validation losses".into()))?;
        table.push((d, loss));
        let better = match &best {
            None => true,
            Some((bd, bl, _)) => loss < *bl || (loss == *bl && d < *bd),
        };
        if better {
            best = Some((d, loss, ens));
        }
    }
    let (best_dim, _, best) = best.expect("grid is nonempty");
    Ok(GridSearchResult { best_dim, table, best })
}

pub fn write_training_curve(path: impl AsRef<Path>, model: &FittedModel) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["epoch", "train_loss", "val_loss"]).map_err(io)?;
    for e in &model.training_curve {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Least-squares solution and the indices of all-zero columns that were
/// dropped (their coefficients are reported as zero).
#[derive(Debug, Clone, PartialEq)]
pub struct OlsSolution {
    pub coefficients: DVector<f64>,
    pub dropped: Vec<usize>,
}

/// Relative singular-value cutoff for declaring the design rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Least squares by SVD of the column-normalized design.
pub fn ols_solve(design: &DMatrix<f64>, targets: &DVector<f64>, names: &[String]) -> Result<OlsSolution> {
    let (m, k) = design.shape();
    if targets.len() != m || names.len() != k {
        return Err(Error::Shape(format!(
            "design {m}x{k}, {} targets, {} column names",
            targets.len(),
            names.len()
        )));
    }
    let norms: Vec<f64> = (0..k).map(|j| design.column(j).norm()).collect();
    let kept: Vec<usize> = (0..k).filter(|&j| norms[j] > 0.0).collect();
    let dropped: Vec<usize> = (0..k).filter(|&j| norms[j] == 0.0).collect();
    if kept.len() > m {
        return Err(Error::RankDeficient {
            columns: kept.iter().map(|&j| names[j].clone()).collect(),
        });
    }
    let x = DMatrix::from_fn(m, kept.len(), |r, c| design[(r, kept[c])] / norms[kept[c]]);
    let svd = SVD::new(x, true, true);
    let smax = svd.singular_values.max();
    let v_t = svd.v_t.as_ref().expect("requested V");
    let mut collinear = std::collections::BTreeSet::new();
    for (s_idx, &s) in svd.singular_values.iter().enumerate() {
        if s <= RANK_TOL * smax {
            for (c, &val) in v_t.row(s_idx).iter().enumerate() {
                if val.abs() > 1e-6 {
                    collinear.insert(kept[c]);
                }
            }
        }
    }
    if !collinear.is_empty() {
        return Err(Error::RankDeficient {
            columns: collinear.into_iter().map(|j| names[j].clone()).collect(),
        });
    }
    let z = svd
        .solve(targets, 0.0)
        .map_err(|e| Error::Degenerate(format!("least-squares solve failed: {e}")))?;
    let mut coefficients = DVector::zeros(k);
    for (c, &j) in kept.iter().enumerate() {
        coefficients[j] = z[c] / norms[j];
    }
    Ok(OlsSolution { coefficients, dropped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub params: LinearParams,
    /// Names of all-zero regressors fixed at zero (e.g. 2nd-hop terms on a graph without 2nd-hop pairs).
    pub dropped: Vec<String>,
}

pub fn coefficient_names(kind: ModelKind, assets: usize) -> Result<Vec<String>> {
    let mut names: Vec<String> = (0..assets).map(|i| format!("alpha[{i}]")).collect();
    names.extend(["beta_d", "beta_w", "beta_m"].map(String::from));
    match kind {
        ModelKind::Har => {}
        ModelKind::Ghar => names.extend(["gamma_d", "gamma_w", "gamma_m"].map(String::from)),
        ModelKind::Ghar2Hop => {
            names.extend(["gamma_d", "gamma_w", "gamma_m", "delta_d", "delta_w", "delta_m"].map(String::from))
        }
        ModelKind::Gnnhar { .. } => {
            return Err(Error::InvalidInput("OLS applies to linear models only".into()));
        }
    }
    Ok(names)
}

/// Pooled OLS with per-asset intercept dummies and shared lag coefficients,
/// over the samples in `range`.
pub fn ols_fit(kind: ModelKind, data: &Dataset, range: Range<usize>) -> Result<OlsFit> {
    let names = coefficient_names(kind, data.n_assets())?;
    let n = data.n_assets();
    if range.is_empty() || range.end > data.len() {
        return Err(Error::InvalidInput(format!(
            "OLS range {range:?} is invalid for {} samples",
            data.len()
        )));
    }
    let rows = range.len() * n;
    let k = names.len();
    let mut x = DMatrix::zeros(rows, k);
    let mut y = DVector::zeros(rows);
    for (d, s) in data.samples[range].iter().enumerate() {
        for i in 0..n {
            let r = d * n + i;
            y[r] = s.target[i];
            x[(r, i)] = 1.0;
            for c in 0..3 {
                x[(r, n + c)] = s.features[(i, c)];
                if k > n + 3 {
                    x[(r, n + 3 + c)] = s.first_hop[(i, c)];
                }
                if k > n + 6 {
                    x[(r, n + 6 + c)] = s.second_hop[(i, c)];
                }
            }
        }
    }
    let sol = ols_solve(&x, &y, &names)?;
    let c = &sol.coefficients;
    let triple = |o: usize| [c[o], c[o + 1], c[o + 2]];
    let params = LinearParams {
        alpha: c.rows(0, n).into_owned(),
        beta: triple(n),
        gamma: (k > n + 3).then(|| triple(n + 3)),
        delta: (k > n + 6).then(|| triple(n + 6)),
    };
    Ok(OlsFit {
        params,
        dropped: sol.dropped.iter().map(|&j| names[j].clone()).collect(),
    })
}

//! Out-of-sample scoring: loss tables, Diebold–Mariano tests, the model
//! confidence set, regime stratification, FVU and MAD diagnostics, and the
//! CSV report writers.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::backtest::{horizon_label, ForecastSet, WindowFit};
use crate::data::{build_horizon_targets, RvPanel};
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::model::ModelParams;
use crate::train::{EstimationCriterion, LossKind};

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Forecasts and realized targets on a common set of origins, for one horizon.
#[derive(Debug, Clone)]
pub struct AlignedHorizon {
    pub horizon: usize,
    pub origins: Vec<NaiveDate>,
    pub actual: DMatrix<f64>,
    /// (model id, forecasts) in first-appearance order; rows match `origins`.
    pub models: Vec<(String, DMatrix<f64>)>,
}

/// Groups forecast sets by horizon and pairs them with realized targets.
/// Origins whose target runs past the panel end are dropped; `days`
/// optionally restricts origins further.
pub fn align(
    forecasts: &[ForecastSet],
    panel: &RvPanel,
    days: Option<&BTreeSet<NaiveDate>>,
) -> Result<Vec<AlignedHorizon>> {
    let index: BTreeMap<NaiveDate, usize> = panel.dates().iter().enumerate().map(|(k, d)| (*d, k)).collect();
    let mut by_h: BTreeMap<usize, Vec<&ForecastSet>> = BTreeMap::new();
    for f in forecasts {
        if f.assets != panel.assets() {
            return Err(Error::Shape(format!(
                "forecast assets of {} differ from the panel",
                f.model_id()
            )));
        }
        by_h.entry(f.horizon).or_default().push(f);
    }
    let mut out = Vec::new();
    for (h, sets) in by_h {
        let first = sets[0];
        for s in &sets[1..] {
            if s.origins != first.origins {
                return Err(Error::Shape(format!(
                    "horizon {h}: {} and {} have different origin dates",
                    first.model_id(),
                    s.model_id()
                )));
            }
        }
        let targets = build_horizon_targets(panel, h)?;
        let mut keep = Vec::new();
        for (r, d) in first.origins.iter().enumerate() {
            let t = *index
                .get(d)
                .ok_or_else(|| Error::Shape(format!("forecast origin {d} is not a panel date")))?;
            if t < targets.values.nrows() && days.is_none_or(|s| s.contains(d)) {
                keep.push((r, t));
            }
        }
        let n = panel.n_assets();
        let actual = DMatrix::from_fn(keep.len(), n, |k, j| targets.values[(keep[k].1, j)]);
        let models = sets
            .iter()
            .map(|s| {
                (
                    s.model_id(),
                    DMatrix::from_fn(keep.len(), n, |k, j| s.values[(keep[k].0, j)]),
                )
            })
            .collect();
        out.push(AlignedHorizon {
            horizon: h,
            origins: keep.iter().map(|(r, _)| first.origins[*r]).collect(),
            actual,
            models,
        });
    }
    Ok(out)
}

/// Elementwise losses (days × assets).
pub fn loss_matrix(actual: &DMatrix<f64>, predicted: &DMatrix<f64>, kind: LossKind) -> Result<DMatrix<f64>> {
    if actual.shape() != predicted.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", actual.shape(), predicted.shape())));
    }
    let ec = match kind {
        LossKind::Mse => EstimationCriterion::mse(),
        LossKind::Qlike => {
            if let Some(y) = actual.iter().find(|y| !(**y > 0.0)) {
                return Err(Error::InvalidInput(format!("QLIKE needs positive actuals, found {y}")));
            }
            EstimationCriterion::qlike()
        }
    };
    Ok(actual.zip_map(predicted, |y, p| ec.point(y, p).0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    pub baseline: String,
    pub horizons: Vec<usize>,
    pub models: Vec<String>,
    /// Mean losses keyed by (model, horizon): [MSE, QLIKE].
    pub losses: BTreeMap<(String, usize), [f64; 2]>,
}

impl LossTable {
    pub fn ratio(&self, model: &str, horizon: usize, kind: LossKind) -> Option<f64> {
        let k = match kind {
            LossKind::Mse => 0,
            LossKind::Qlike => 1,
        };
        let m = self.losses.get(&(model.to_string(), horizon))?[k];
        let b = self.losses.get(&(self.baseline.clone(), horizon))?[k];
        Some(m / b)
    }
}

/// Mean MSE and QLIKE per model and horizon over the joint (day, asset) sample.
pub fn loss_table(
    forecasts: &[ForecastSet],
    panel: &RvPanel,
    baseline: &str,
    days: Option<&BTreeSet<NaiveDate>>,
) -> Result<LossTable> {
    let aligned = align(forecasts, panel, days)?;
    let mut models: Vec<String> = Vec::new();
    let mut losses = BTreeMap::new();
    for h in &aligned {
        if h.origins.is_empty() {
            return Err(Error::Degenerate(format!(
                "no evaluable origins at horizon {}",
                h.horizon
            )));
        }
        if !h.models.iter().any(|(m, _)| m == baseline) {
            return Err(Error::InvalidInput(format!(
                "baseline {baseline} has no forecasts at horizon {}",
                h.horizon
            )));
        }
        for (m, f) in &h.models {
            if !models.contains(m) {
                models.push(m.clone());
            }
            let mse = loss_matrix(&h.actual, f, LossKind::Mse)?.mean();
            let ql = loss_matrix(&h.actual, f, LossKind::Qlike)?.mean();
            losses.insert((m.clone(), h.horizon), [mse, ql]);
        }
    }
    Ok(LossTable {
        baseline: baseline.to_string(),
        horizons: aligned.iter().map(|h| h.horizon).collect(),
        models,
        losses,
    })
}

/// Wide layout: one row per model, `{horizon}_{MSE|QLIKE}` ratio columns.
pub fn write_loss_table(path: impl AsRef<Path>, table: &LossTable) -> Result<()> {
    let mut header = vec!["model".to_string()];
    for h in &table.horizons {
        header.push(format!("{}_MSE", horizon_label(*h)));
        header.push(format!("{}_QLIKE", horizon_label(*h)));
    }
    let mut rows = Vec::new();
    for m in &table.models {
        let mut row = vec![m.clone()];
        for h in &table.horizons {
            for kind in [LossKind::Mse, LossKind::Qlike] {
                row.push(table.ratio(m, *h, kind).map(|r| format!("{r:.6}")).unwrap_or_default());
            }
        }
        rows.push(row);
    }
    write_csv(path, &header, rows)
}

pub(crate) fn write_csv(path: impl AsRef<Path>, header: &[impl AsRef<[u8]>], rows: Vec<Vec<String>>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmResult {
    pub statistic: f64,
    pub p_value: f64,
    pub cross_sectional: bool,
    pub n: usize,
}

/// Diebold–Mariano test of equal mean loss with a Bartlett (Newey–West)
/// long-run variance at lag `h`, the small-sample correction for `h+1`-step
/// forecasts, and a two-sided Student-t(n−1) p-value.
pub fn dm_test(loss_a: &[f64], loss_b: &[f64], h: usize) -> Result<DmResult> {
    let n = loss_a.len();
    if n != loss_b.len() {
        return Err(Error::Shape(format!("loss series of length {n} and {}", loss_b.len())));
    }
    if n < 10 {
        return Err(Error::InvalidInput(format!(
            "DM test needs at least 10 observations, got {n}"
        )));
    }
    if loss_a.iter().chain(loss_b).any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("non-finite loss in DM test".into()));
    }
    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| a - b).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let autocov = |k: usize| (k..n).map(|t| (d[t] - mean) * (d[t - k] - mean)).sum::<f64>() / nf;
    let mut lrv = autocov(0);
    for k in 1..=h.min(n - 1) {
        lrv += 2.0 * (1.0 - k as f64 / (h + 1) as f64) * autocov(k);
    }
    if !(lrv > 0.0) {
        if d.iter().all(|x| *x == 0.0) {
            return Ok(DmResult {
                statistic: 0.0,
                p_value: 1.0,
                cross_sectional: false,
                n,
            });
        }
        return Err(Error::Degenerate("loss differential has zero variance".into()));
    }
    let steps = (h + 1) as f64;
    let correction = ((nf + 1.0 - 2.0 * steps + steps * (steps - 1.0) / nf) / nf).sqrt();
    let statistic = correction * mean / (lrv / nf).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| Error::Degenerate(e.to_string()))?;
    let p_value = (2.0 * (1.0 - t.cdf(statistic.abs()))).clamp(0.0, 1.0);
    Ok(DmResult {
        statistic,
        p_value,
        cross_sectional: false,
        n,
    })
}

/// DM test on the per-day cross-sectional mean of two (days × assets) loss panels.
pub fn dm_test_cross_sectional(loss_a: &DMatrix<f64>, loss_b: &DMatrix<f64>, h: usize) -> Result<DmResult> {
    if loss_a.shape() != loss_b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", loss_a.shape(), loss_b.shape())));
    }
    let row_mean = |m: &DMatrix<f64>| -> Vec<f64> { m.row_iter().map(|r| r.mean()).collect() };
    let mut r = dm_test(&row_mean(loss_a), &row_mean(loss_b), h)?;
    r.cross_sectional = true;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct McsConfig {
    pub alpha: f64,
    pub bootstrap_reps: usize,
    pub block_length: usize,
    pub seed: u64,
}

impl Default for McsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            bootstrap_reps: 1000,
            block_length: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McsResult {
    /// Indices (rows of the loss matrix) of the surviving models, ascending.
    pub surviving: Vec<usize>,
    /// MCS p-value per model; surviving models have p ≥ alpha.
    pub p_values: Vec<f64>,
    /// Eliminated models in elimination order.
    pub eliminated: Vec<usize>,
    pub alpha: f64,
}

/// Moving-block bootstrap draw of `n` indices.
fn block_indices(n: usize, block: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let block = block.clamp(1, n);
    let mut idx = Vec::with_capacity(n);
    while idx.len() < n {
        let start = rng.random_range(0..=n - block);
        idx.extend((start..start + block).take(n - idx.len()));
    }
    idx
}

/// Model confidence set with the range statistic `T_R = max |t_ij|` and a
/// moving-block bootstrap; `losses` is models × days.
pub fn mcs(losses: &DMatrix<f64>, cfg: &McsConfig) -> Result<McsResult> {
    let (m, n) = losses.shape();
    if m < 2 {
        return Err(Error::InvalidInput(format!("MCS needs at least 2 models, got {m}")));
    }
    if n < 2 || cfg.bootstrap_reps == 0 || cfg.block_length == 0 || !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "MCS needs ≥ 2 days, reps ≥ 1, block ≥ 1 and alpha in (0, 1); got {n} days, {cfg:?}"
        )));
    }
    if losses.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("non-finite loss in MCS".into()));
    }
    let means: DVector<f64> = DVector::from_fn(m, |i, _| losses.row(i).mean());
    // bootstrap model means, reps × models; one index draw per replication
    let boot: Vec<Vec<f64>> = (0..cfg.bootstrap_reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(b as u64);
            let idx = block_indices(n, cfg.block_length, &mut rng);
            (0..m)
                .map(|i| idx.iter().map(|&t| losses[(i, t)]).sum::<f64>() / n as f64)
                .collect()
        })
        .collect();
    let reps = cfg.bootstrap_reps as f64;
    let var = |i: usize, j: usize| -> f64 {
        let d = means[i] - means[j];
        boot.iter().map(|bm| (bm[i] - bm[j] - d).powi(2)).sum::<f64>() / reps
    };
    let ratio = |num: f64, v: f64| -> f64 {
        if v > 0.0 {
            num / v.sqrt()
        } else if num == 0.0 {
            0.0
        } else {
            num.signum() * f64::INFINITY
        }
    };

    let mut alive: Vec<usize> = (0..m).collect();
    let mut p_values = vec![1.0; m];
    let mut eliminated = Vec::new();
    let mut running_max = 0.0f64;
    while alive.len() > 1 {
        let mut t_max = 0.0f64;
        let mut worst = (alive[0], f64::NEG_INFINITY);
        let pairs: Vec<(usize, usize, f64)> = alive
            .iter()
            .flat_map(|&i| alive.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
            .map(|(i, j)| (i, j, var(i, j)))
            .collect();
        for &(i, j, v) in &pairs {
            let t = ratio(means[i] - means[j], v);
            t_max = t_max.max(t.abs());
        }
        for &i in &alive {
            let sup = pairs
                .iter()
                .filter(|(a, _, _)| *a == i)
                .map(|&(_, j, v)| ratio(means[i] - means[j], v))
                .fold(f64::NEG_INFINITY, f64::max);
            if sup > worst.1 {
                worst = (i, sup);
            }
        }
        let exceed = boot
            .iter()
            .filter(|bm| {
                let t_star = pairs
                    .iter()
                    .map(|&(i, j, v)| ratio(bm[i] - bm[j] - (means[i] - means[j]), v).abs())
                    .filter(|x| x.is_finite())
                    .fold(0.0f64, f64::max);
                t_star >= t_max
            })
            .count();
        let p = exceed as f64 / reps;
        running_max = running_max.max(p);
        if p >= cfg.alpha {
            for &i in &alive {
                p_values[i] = running_max;
            }
            break;
        }
        p_values[worst.0] = running_max;
        eliminated.push(worst.0);
        alive.retain(|&i| i != worst.0);
    }
    if alive.len() == 1 {
        p_values[alive[0]] = 1.0;
    }
    Ok(McsResult {
        surviving: alive,
        p_values,
        eliminated,
        alpha: cfg.alpha,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimePartition {
    pub threshold: f64,
    pub calm: BTreeSet<NaiveDate>,
    pub turbulent: BTreeSet<NaiveDate>,
}

/// Splits days at the type-7 `q`-quantile of the index RV; ties go to calm.
pub fn stratify_by_regime(dates: &[NaiveDate], index_rv: &[f64], q: f64) -> Result<RegimePartition> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidInput(format!(
            "regime quantile must lie in (0, 1), got {q}"
        )));
    }
    if dates.len() != index_rv.len() || dates.is_empty() {
        return Err(Error::Shape(format!(
            "{} dates and {} index values",
            dates.len(),
            index_rv.len()
        )));
    }
    let threshold = quantile_sorted(&sorted(index_rv), q);
    let (mut calm, mut turbulent) = (BTreeSet::new(), BTreeSet::new());
    for (d, x) in dates.iter().zip(index_rv) {
        if *x <= threshold {
            calm.insert(*d);
        } else {
            turbulent.insert(*d);
        }
    }
    Ok(RegimePartition {
        threshold,
        calm,
        turbulent,
    })
}

/// Per-day `Σ_i (F_i − B_i)² / Σ_i (F_i − F̄)²`; `None` where the model's
/// cross-section is constant.
pub fn fvu(model: &DMatrix<f64>, baseline: &DMatrix<f64>) -> Result<Vec<Option<f64>>> {
    if model.shape() != baseline.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", model.shape(), baseline.shape())));
    }
    let n = model.ncols();
    Ok((0..model.nrows())
        .map(|t| {
            let mut mean = 0.0;
            for i in 0..n {
                mean += model[(t, i)];
            }
            mean /= n as f64;
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                num += (model[(t, i)] - baseline[(t, i)]).powi(2);
                den += (model[(t, i)] - mean).powi(2);
            }
            (den > 0.0).then(|| num / den)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MadResult {
    pub value: f64,
    /// Nodes with at least one edge whose representation is the zero vector.
    pub excluded: usize,
}

/// Mean average cosine distance between graph neighbours' representations.
pub fn mad(hidden: &DMatrix<f64>, a: &Adjacency) -> Result<MadResult> {
    let n = a.n();
    if hidden.nrows() != n {
        return Err(Error::Shape(format!(
            "{} representations for {n} nodes",
            hidden.nrows()
        )));
    }
    // squared norms keep cos(x, x) exactly 1: sqrt(fl(s²)) == s
    let sq: Vec<f64> = (0..n).map(|i| hidden.row(i).dot(&hidden.row(i))).collect();
    let excluded = (0..n).filter(|&i| a.degree(i) > 0 && sq[i] == 0.0).count();
    if excluded > 0 {
        log::warn!("MAD: {excluded} connected nodes with zero representation excluded");
    }
    let mut total = 0.0;
    let mut rows = 0usize;
    for i in 0..n {
        if sq[i] == 0.0 {
            continue;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for j in a.neighbors(i) {
            if sq[j] == 0.0 {
                continue;
            }
            let d = 1.0 - hidden.row(i).dot(&hidden.row(j)) / (sq[i] * sq[j]).sqrt();
            if d > 0.0 {
                sum += d;
                count += 1;
            }
        }
        if count > 0 {
            let avg = sum / count as f64;
            if avg > 0.0 {
                total += avg;
                rows += 1;
            }
        }
    }
    let value = if rows == 0 { 0.0 } else { total / rows as f64 };
    Ok(MadResult { value, excluded })
}

/// Five-number box-plot summary; whiskers are the most extreme observations
/// within 1.5·IQR of the quartiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSummary {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub lower_whisker: f64,
    pub upper_whisker: f64,
}

pub fn box_summary(values: &[f64]) -> Result<BoxSummary> {
    if values.is_empty() {
        return Err(Error::InvalidInput("box summary of no values".into()));
    }
    let s = sorted(values);
    let q1 = quantile_sorted(&s, 0.25);
    let q3 = quantile_sorted(&s, 0.75);
    let iqr = q3 - q1;
    let lo = q1 - 1.5 * iqr;
    let hi = q3 + 1.5 * iqr;
    Ok(BoxSummary {
        n: s.len(),
        median: quantile_sorted(&s, 0.5),
        q1,
        q3,
        lower_whisker: *s.iter().find(|x| **x >= lo).expect("q1 lies within the fence"),
        upper_whisker: *s.iter().rev().find(|x| **x <= hi).expect("q3 lies within the fence"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRatioRow {
    pub model: String,
    pub horizon: usize,
    pub regime: String,
    /// `error` (forecast − actual) or `ratio` (forecast / actual).
    pub quantity: &'static str,
    pub summary: BoxSummary,
}

/// Box summaries of forecast errors and ratios per model, horizon and regime
/// (`all`, plus `calm`/`turbulent` when a partition is given).
pub fn error_ratio_report(
    forecasts: &[ForecastSet],
    panel: &RvPanel,
    regimes: Option<&RegimePartition>,
) -> Result<Vec<ErrorRatioRow>> {
    let mut strata: Vec<(&str, Option<&BTreeSet<NaiveDate>>)> = vec![("all", None)];
    if let Some(r) = regimes {
        strata.push(("calm", Some(&r.calm)));
        strata.push(("turbulent", Some(&r.turbulent)));
    }
    let mut rows = Vec::new();
    for (name, days) in strata {
        for h in align(forecasts, panel, days)? {
            if h.origins.is_empty() {
                continue;
            }
            for (m, f) in &h.models {
                let errors: Vec<f64> = f.iter().zip(h.actual.iter()).map(|(p, y)| p - y).collect();
                let ratios: Vec<f64> = f.iter().zip(h.actual.iter()).map(|(p, y)| p / y).collect();
                for (quantity, v) in [("error", errors), ("ratio", ratios)] {
                    rows.push(ErrorRatioRow {
                        model: m.clone(),
                        horizon: h.horizon,
                        regime: name.to_string(),
                        quantity,
                        summary: box_summary(&v)?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRow {
    pub window: usize,
    pub test_month: String,
    pub model: String,
    pub horizon: usize,
    pub coefficient: String,
    pub value: f64,
}

/// Named coefficient of a fitted model: `beta_d|w|m`, `gamma_d|w|m`, `delta_d|w|m`.
pub fn named_coefficient(params: &ModelParams, name: &str) -> Option<f64> {
    let (block, lag) = name.split_once('_')?;
    let k = ["d", "w", "m"].iter().position(|x| *x == lag)?;
    match (block, params) {
        ("beta", p) => Some(p.beta()[k]),
        ("gamma", ModelParams::Linear(p)) => p.gamma.map(|g| g[k]),
        ("delta", ModelParams::Linear(p)) => p.delta.map(|d| d[k]),
        _ => None,
    }
}

/// Per-window series of the requested coefficients, averaged over ensemble members.
pub fn coefficient_trajectory_report(fits: &[WindowFit], coefficients: &[&str]) -> Result<Vec<CoefficientRow>> {
    let mut rows = Vec::new();
    for fit in fits {
        for name in coefficients {
            let mut sum = 0.0;
            for p in &fit.members {
                sum += named_coefficient(p, name)
                    .ok_or_else(|| Error::InvalidInput(format!("model {} has no coefficient {name}", fit.model)))?;
            }
            rows.push(CoefficientRow {
                window: fit.window,
                test_month: fit.test_month.clone(),
                model: fit.model.clone(),
                horizon: fit.horizon,
                coefficient: name.to_string(),
                value: sum / fit.members.len() as f64,
            });
        }
    }
    Ok(rows)
}

/// Coefficient names a model kind carries, for trajectory reports.
pub fn available_coefficients(params: &ModelParams) -> Vec<&'static str> {
    let all = [
        "beta_d", "beta_w", "beta_m", "gamma_d", "gamma_w", "gamma_m", "delta_d", "delta_w", "delta_m",
    ];
    all.into_iter()
        .filter(|n| named_coefficient(params, n).is_some())
        .collect()
}

/// Inputs for [`write_report_bundle`].
#[derive(Debug, Clone)]
pub struct ReportInputs<'a> {
    pub forecasts: &'a [ForecastSet],
    pub panel: &'a RvPanel,
    pub baseline: &'a str,
    pub regimes: Option<&'a RegimePartition>,
    pub window_fits: &'a [WindowFit],
    pub mad_rows: &'a [(usize, String, usize, f64)],
    pub mcs: McsConfig,
}

/// Writes the loss tables, DM, MCS, FVU, MAD, box-plot and coefficient CSVs
/// into `dir`; returns the file names written, in order.
pub fn write_report_bundle(dir: impl AsRef<Path>, r: &ReportInputs<'_>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut emit = |name: &str| {
        written.push(name.to_string());
        dir.join(name)
    };

    write_loss_table(
        emit("loss_table.csv"),
        &loss_table(r.forecasts, r.panel, r.baseline, None)?,
    )?;
    if let Some(reg) = r.regimes {
        for (name, days) in [("calm", &reg.calm), ("turbulent", &reg.turbulent)] {
            match loss_table(r.forecasts, r.panel, r.baseline, Some(days)) {
                Ok(t) => write_loss_table(emit(&format!("loss_table_{name}.csv")), &t)?,
                Err(Error::Degenerate(msg)) => log::warn!("{name} loss table skipped: {msg}"),
                Err(e) => return Err(e),
            }
        }
    }

    let aligned = align(r.forecasts, r.panel, None)?;
    let mut dm_rows = Vec::new();
    let mut mcs_rows = Vec::new();
    let mut fvu_rows = Vec::new();
    for h in &aligned {
        let base = &h
            .models
            .iter()
            .find(|(m, _)| m == r.baseline)
            .ok_or_else(|| Error::InvalidInput(format!("baseline {} missing at horizon {}", r.baseline, h.horizon)))?
            .1;
        for kind in [LossKind::Mse, LossKind::Qlike] {
            let lb = loss_matrix(&h.actual, base, kind)?;
            let per_model: Vec<DMatrix<f64>> = h
                .models
                .iter()
                .map(|(_, f)| loss_matrix(&h.actual, f, kind))
                .collect::<Result<_>>()?;
            for ((m, _), lm) in h.models.iter().zip(&per_model) {
                if m == r.baseline {
                    continue;
                }
                let mut push = |asset: &str, res: Result<DmResult>| {
                    let (s, p) = match res {
                        Ok(d) => (d.statistic.to_string(), d.p_value.to_string()),
                        Err(Error::Degenerate(_)) => (String::new(), String::new()),
                        Err(e) => return Err(e),
                    };
                    dm_rows.push(vec![
                        m.clone(),
                        r.baseline.to_string(),
                        horizon_label(h.horizon),
                        kind.to_string(),
                        asset.to_string(),
                        s,
                        p,
                    ]);
                    Ok(())
                };
                for (j, asset) in r.panel.assets().iter().enumerate() {
                    let a: Vec<f64> = lm.column(j).iter().copied().collect();
                    let b: Vec<f64> = lb.column(j).iter().copied().collect();
                    push(asset, dm_test(&a, &b, h.horizon))?;
                }
                push("__cross__", dm_test_cross_sectional(lm, &lb, h.horizon))?;
            }
            if h.models.len() >= 2 {
                let days = h.origins.len();
                let l = DMatrix::from_fn(per_model.len(), days, |i, t| per_model[i].row(t).mean());
                match mcs(&l, &r.mcs) {
                    Ok(res) => {
                        for (i, (m, _)) in h.models.iter().enumerate() {
                            mcs_rows.push(vec![
                                horizon_label(h.horizon),
                                kind.to_string(),
                                m.clone(),
                                res.p_values[i].to_string(),
                                res.surviving.contains(&i).to_string(),
                            ]);
                        }
                    }
                    Err(Error::InvalidInput(msg)) => log::warn!("MCS skipped: {msg}"),
                    Err(e) => return Err(e),
                }
            }
        }
        for (m, f) in &h.models {
            if m == r.baseline {
                continue;
            }
            for (t, v) in fvu(f, base)?.into_iter().enumerate() {
                fvu_rows.push(vec![
                    h.origins[t].to_string(),
                    m.clone(),
                    horizon_label(h.horizon),
                    v.map(|x| x.to_string()).unwrap_or_default(),
                ]);
            }
        }
    }
    write_csv(
        emit("dm.csv"),
        &["model", "baseline", "horizon", "loss", "asset", "statistic", "p_value"],
        dm_rows,
    )?;
    write_csv(
        emit("mcs.csv"),
        &["horizon", "loss", "model", "p_value", "in_set"],
        mcs_rows,
    )?;
    write_csv(emit("fvu.csv"), &["date", "model", "horizon", "fvu"], fvu_rows)?;
    write_csv(
        emit("mad.csv"),
        &["window", "model", "layers", "mad"],
        r.mad_rows
            .iter()
            .map(|(w, m, l, v)| vec![w.to_string(), m.clone(), l.to_string(), v.to_string()])
            .collect(),
    )?;

    let boxes = error_ratio_report(r.forecasts, r.panel, r.regimes)?;
    write_csv(
        emit("boxplot.csv"),
        &[
            "model",
            "horizon",
            "regime",
            "quantity",
            "n",
            "lower_whisker",
            "q1",
            "median",
            "q3",
            "upper_whisker",
        ],
        boxes
            .iter()
            .map(|b| {
                let s = b.summary;
                vec![
                    b.model.clone(),
                    horizon_label(b.horizon),
                    b.regime.clone(),
                    b.quantity.to_string(),
                    s.n.to_string(),
                    s.lower_whisker.to_string(),
                    s.q1.to_string(),
                    s.median.to_string(),
                    s.q3.to_string(),
                    s.upper_whisker.to_string(),
                ]
            })
            .collect(),
    )?;

    let mut coef_rows = Vec::new();
    for fit in r.window_fits {
        let Some(first) = fit.members.first() else { continue };
        let names = available_coefficients(first);
        for row in coefficient_trajectory_report(std::slice::from_ref(fit), &names)? {
            coef_rows.push(vec![
                row.window.to_string(),
                row.test_month,
                row.model,
                horizon_label(row.horizon),
                row.coefficient,
                row.value.to_string(),
            ]);
        }
    }
    write_csv(
        emit("coefficients.csv"),
        &["window", "test_month", "model", "horizon", "coefficient", "value"],
        coef_rows,
    )?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::erdos_renyi;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile_sorted(&v, 0.9) - 90.1).abs() < 1e-12);
        assert_eq!(quantile_sorted(&v, 0.5), 50.5);
        assert_eq!(quantile_sorted(&[3.0], 0.3), 3.0);
    }

    fn days(n: usize) -> Vec<NaiveDate> {
        crate::data::business_days(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), n)
    }

    #[test]
    fn regime_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let r = stratify_by_regime(&days(100), &v, 0.9).unwrap();
        assert_eq!((r.calm.len(), r.turbulent.len()), (90, 10));
        let m = stratify_by_regime(&days(100), &v, 0.5).unwrap();
        assert_eq!((m.calm.len(), m.turbulent.len()), (50, 50));
        let c = stratify_by_regime(&days(10), &[2.0; 10], 0.9).unwrap();
        assert_eq!(c.calm.len(), 10);
        assert!(stratify_by_regime(&days(10), &[2.0; 10], 1.0).is_err());
    }

    #[test]
    fn dm_identical_losses() {
        let a: Vec<f64> = (0..50).map(|k| (k % 7) as f64).collect();
        let r = dm_test(&a, &a, 0).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let shifted: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        assert!(matches!(dm_test(&shifted, &a, 0), Err(Error::Degenerate(_))));
        assert!(dm_test(&a[..5], &a[..5], 0).is_err());
    }

    #[test]
    fn dm_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        for h in [0, 4, 21] {
            let ab = dm_test(&a, &b, h).unwrap();
            let ba = dm_test(&b, &a, h).unwrap();
            assert_eq!(ab.statistic, -ba.statistic);
            assert_eq!(ab.p_value, ba.p_value);
        }
    }

    #[test]
    fn dm_statistic_tracks_mean_shift() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let (mu, n) = (0.1, 1000);
        let mut total = 0.0;
        let reps = 1000;
        for r in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(r);
            let d: Vec<f64> = (0..n).map(|_| mu + normal.sample(&mut rng)).collect();
            total += dm_test(&d, &vec![0.0; n], 0).unwrap().statistic;
        }
        let mean = total / reps as f64;
        assert!((mean - mu * (n as f64).sqrt()).abs() < 0.2, "{mean}");
    }

    #[test]
    fn dm_cross_sectional_examples() {
        // offsetting errors across two assets cancel in the cross-sectional mean
        let a = DMatrix::from_fn(20, 2, |t, j| if j == 0 { 1.0 + (t % 3) as f64 } else { 0.0 });
        let b = DMatrix::from_fn(20, 2, |t, j| if j == 1 { 1.0 + (t % 3) as f64 } else { 0.0 });
        let r = dm_test_cross_sectional(&a, &b, 0).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));

        // hand case: d_t alternates 1, 3 in the cross-sectional mean
        let a = DMatrix::from_fn(10, 2, |t, j| if t % 2 == 0 { [1.0, 1.0][j] } else { [2.0, 4.0][j] });
        let b = DMatrix::zeros(10, 2);
        let r = dm_test_cross_sectional(&a, &b, 0).unwrap();
        // mean 2, variance 1 → t = 2 / sqrt(1/10) · sqrt((10+1-2)/10)
        let want = 2.0 / (0.1f64).sqrt() * (0.9f64).sqrt();
        assert!((r.statistic - want).abs() < 1e-12);

        let single_a = DMatrix::from_fn(30, 1, |t, _| (t as f64 * 0.7).cos());
        let single_b = DMatrix::from_fn(30, 1, |t, _| (t as f64 * 0.3).sin());
        let cross = dm_test_cross_sectional(&single_a, &single_b, 0).unwrap();
        let per = dm_test(single_a.as_slice(), single_b.as_slice(), 0).unwrap();
        assert_eq!((cross.statistic, cross.p_value), (per.statistic, per.p_value));
    }

    fn noise_losses(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        DMatrix::from_fn(m, n, |_, _| 5.0 + normal.sample(&mut rng))
    }

    #[test]
    fn mcs_identical_models_all_survive() {
        let row = noise_losses(1, 200, 3);
        let l = DMatrix::from_fn(3, 200, |_, t| row[(0, t)]);
        let r = mcs(&l, &McsConfig::default()).unwrap();
        assert_eq!(r.surviving, vec![0, 1, 2]);
    }

    #[test]
    fn mcs_eliminates_shifted_model() {
        let mut l = noise_losses(3, 250, 4);
        for t in 0..250 {
            l[(1, t)] += 10.0;
        }
        let r = mcs(
            &l,
            &McsConfig {
                bootstrap_reps: 300,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!r.surviving.contains(&1));
        assert!(r.surviving.contains(&0) && r.surviving.contains(&2));
        assert!(mcs(&l.rows(0, 1).into_owned(), &McsConfig::default()).is_err());
    }

    #[test]
    fn mcs_duplicate_keeps_original() {
        for seed in 0..5 {
            let l = noise_losses(3, 200, 10 + seed);
            let cfg = McsConfig {
                bootstrap_reps: 300,
                seed,
                ..Default::default()
            };
            let r = mcs(&l, &cfg).unwrap();
            let i = r.surviving[0];
            let mut dup = DMatrix::zeros(4, 200);
            dup.rows_mut(0, 3).copy_from(&l);
            dup.row_mut(3).copy_from(&l.row(i));
            let r2 = mcs(&dup, &cfg).unwrap();
            assert!(r2.surviving.contains(&i), "seed {seed}");
        }
    }

    #[test]
    fn mcs_agrees_with_dm_for_two_models() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut agree = 0;
        for case in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
            let shift = 0.3 * (case % 5) as f64 / 4.0;
            let n = 200;
            let a: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..n).map(|_| shift + normal.sample(&mut rng)).collect();
            let dm_reject = dm_test(&a, &b, 0).unwrap().p_value < 0.05;
            let l = DMatrix::from_fn(2, n, |i, t| if i == 0 { a[t] } else { b[t] });
            let r = mcs(
                &l,
                &McsConfig {
                    bootstrap_reps: 500,
                    block_length: 1,
                    seed: case,
                    ..Default::default()
                },
            )
            .unwrap();
            let mcs_reject = r.surviving.len() == 1;
            if dm_reject == mcs_reject {
                agree += 1;
            }
        }
        assert!(agree >= 90, "{agree}");
    }

    fn naive_fvu(f: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<Option<f64>> {
        let mut out = Vec::new();
        for t in 0..f.nrows() {
            let n = f.ncols();
            let mut mean = 0.0;
            for i in 0..n {
                mean += f[(t, i)];
            }
            mean /= n as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                num += (f[(t, i)] - b[(t, i)]).powi(2);
            }
            for i in 0..n {
                den += (f[(t, i)] - mean).powi(2);
            }
            out.push(if den > 0.0 { Some(num / den) } else { None });
        }
        out
    }

    #[test]
    fn fvu_examples() {
        let f = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 4.0, 3.0, 3.0, 3.0]);
        assert_eq!(fvu(&f, &f).unwrap(), vec![Some(0.0), None]);
        let means = DMatrix::from_fn(2, 3, |t, _| f.row(t).mean());
        assert_eq!(fvu(&f, &means).unwrap()[0], Some(1.0));
        // hand case: F = (1,2,4), B = (1,1,1): num 0+1+9 = 10, den (16+1+25)/9 = 42/9
        let b = DMatrix::from_element(2, 3, 1.0);
        assert!((fvu(&f, &b).unwrap()[0].unwrap() - 15.0 / 7.0).abs() < 1e-12);
    }

    fn naive_mad(h: &DMatrix<f64>, a: &Adjacency) -> f64 {
        let n = a.n();
        let mut total = 0.0;
        let mut rows = 0usize;
        for i in 0..n {
            let ni = h.row(i).dot(&h.row(i));
            let mut sum = 0.0;
            let mut count = 0usize;
            for j in 0..n {
                let nj = h.row(j).dot(&h.row(j));
                if !a.has_edge(i, j) || ni == 0.0 || nj == 0.0 {
                    continue;
                }
                let d = 1.0 - h.row(i).dot(&h.row(j)) / (ni * nj).sqrt();
                if d > 0.0 {
                    sum += d;
                    count += 1;
                }
            }
            if count > 0 && sum / count as f64 > 0.0 {
                total += sum / count as f64;
                rows += 1;
            }
        }
        if rows == 0 {
            0.0
        } else {
            total / rows as f64
        }
    }

    #[test]
    fn mad_examples() {
        let a = Adjacency::from_edges(2, &[(0, 1)]).unwrap();
        let orth = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        assert_eq!(mad(&orth, &a).unwrap().value, 1.0);
        let same = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(mad(&same, &a).unwrap().value, 0.0);
        let zero = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 2.0]);
        assert_eq!(
            mad(&zero, &a).unwrap(),
            MadResult {
                value: 0.0,
                excluded: 1
            }
        );
    }

    #[test]
    fn box_summary_examples() {
        let s = box_summary(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (2.0, 3.0, 4.0));
        assert_eq!((s.lower_whisker, s.upper_whisker), (1.0, 4.0));
        let zeros = box_summary(&[0.0; 7]).unwrap();
        assert_eq!(
            (zeros.median, zeros.lower_whisker, zeros.upper_whisker),
            (0.0, 0.0, 0.0)
        );
    }

    proptest! {
        #[test]
        fn fvu_matches_naive(seed in 0u64..1000, n in 2usize..20, days in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = DMatrix::from_fn(days, n, |_, _| rng.random_range(0.0..3.0));
            let b = DMatrix::from_fn(days, n, |_, _| rng.random_range(0.0..3.0));
            prop_assert_eq!(fvu(&f, &b).unwrap(), naive_fvu(&f, &b));
        }

        #[test]
        fn fvu_shift_invariant(seed in 0u64..1000, c in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = DMatrix::from_fn(1, 8, |_, _| rng.random_range(0.0..3.0));
            let b = DMatrix::from_fn(1, 8, |_, _| rng.random_range(0.0..3.0));
            let x = fvu(&f, &b).unwrap()[0].unwrap();
            let y = fvu(&f.add_scalar(c), &b.add_scalar(c)).unwrap()[0].unwrap();
            prop_assert!((x - y).abs() <= 1e-9 * x.max(1.0));
        }

        #[test]
        fn mad_matches_naive_and_is_bounded(seed in 0u64..1000, n in 2usize..20, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = erdos_renyi(n, 0.3, &mut rng);
            let h = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
            let m = mad(&h, &a).unwrap().value;
            prop_assert_eq!(m, naive_mad(&h, &a));
            prop_assert!((0.0..=2.0).contains(&m));
        }

        #[test]
        fn regimes_partition_days(seed in 0u64..1000, q in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
            let r = stratify_by_regime(&days(60), &v, q).unwrap();
            prop_assert_eq!(r.calm.len() + r.turbulent.len(), 60);
            prop_assert!(r.calm.is_disjoint(&r.turbulent));
        }
    }
}

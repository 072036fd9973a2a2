//! Synthetic panels with a known spillover graph, used as oracle data.

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::{Cholesky, DMatrix, DVector, Schur};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{RvPanel, HAR_LAGS};
use crate::error::{Error, Result};
use crate::graph::{hop2, normalize, Adjacency};
use crate::model::{GraphOperators, ModelParams};

/// State space in which the recursion runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgpSpace {
    /// `log RV_t = f(lags of log RV) + σ ε_t`; positivity by construction.
    Log,
    /// `RV_t = f(lags of RV) · exp(σ ε_t − σ²/2)`, a multiplicative-error
    /// model whose conditional mean is exactly the forecaster `f`.
    Level,
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub adjacency: Adjacency,
    pub coefficients: ModelParams,
    pub noise_scale: f64,
    pub n_days: usize,
    pub seed: u64,
    pub space: DgpSpace,
    /// Days simulated and discarded before the first emitted row.
    pub burn_in: usize,
    /// First emitted date; rows follow the Monday-to-Friday calendar.
    pub start_date: NaiveDate,
    /// Strength `ρ` of the return precision `I − ρW`; must lie in [0, 1).
    pub return_coupling: f64,
}

impl SyntheticSpec {
    pub fn new(adjacency: Adjacency, coefficients: ModelParams, noise_scale: f64, n_days: usize, seed: u64) -> Self {
        Self {
            adjacency,
            coefficients,
            noise_scale,
            n_days,
            seed,
            space: DgpSpace::Log,
            burn_in: 500,
            start_date: NaiveDate::from_ymd_opt(2007, 7, 2).expect("valid date"),
            return_coupling: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub panel: RvPanel,
    /// Daily returns `√RV_t ⊙ z_t`, `z_t ~ N(0, Σ)`, with `Σ⁻¹` supported on the graph.
    pub returns: DMatrix<f64>,
    /// Unit-diagonal return covariance.
    pub return_covariance: DMatrix<f64>,
}

/// Consecutive weekdays starting at the first weekday on or after `start`.
pub fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Lag-k blocks Φ_1..Φ_22 of the linear (or dominating linear) recursion.
fn lag_blocks(spec: &SyntheticSpec) -> Vec<DMatrix<f64>> {
    let n = spec.adjacency.n();
    let w1 = normalize(&spec.adjacency).matrix().clone();
    let eye = DMatrix::<f64>::identity(n, n);
    let per_horizon: Vec<DMatrix<f64>> = match &spec.coefficients {
        ModelParams::Linear(p) => {
            let w2 = normalize(&hop2(&spec.adjacency)).matrix().clone();
            let g = p.gamma.unwrap_or([0.0; 3]);
            let d = p.delta.unwrap_or([0.0; 3]);
            (0..3).map(|k| &eye * p.beta[k] + &w1 * g[k] + &w2 * d[k]).collect()
        }
        ModelParams::Gnn(p) => {
            // |ReLU(x)| ≤ |x| and W ≥ 0, so |W^L V |Θ_1|..|Θ_L| |γ|| dominates the spillover
            let mut c = p.gamma.abs();
            for theta in p.layers.iter().rev() {
                c = theta.abs() * c;
            }
            let mut wl = eye.clone();
            for _ in 0..p.layers.len() {
                wl = &wl * &w1;
            }
            (0..3).map(|k| &eye * p.beta[k].abs() + &wl * c[k]).collect()
        }
    };
    (1..=HAR_LAGS)
        .map(|lag| match lag {
            1 => per_horizon[0].clone(),
            2..=5 => &per_horizon[1] / 4.0,
            _ => &per_horizon[2] / 17.0,
        })
        .collect()
}

/// Spectral radius of the 22N-dimensional companion matrix.
pub fn companion_spectral_radius(spec: &SyntheticSpec) -> f64 {
    let n = spec.adjacency.n();
    let blocks = lag_blocks(spec);
    let dim = HAR_LAGS * n;
    let mut c = DMatrix::<f64>::zeros(dim, dim);
    for (k, b) in blocks.iter().enumerate() {
        c.view_mut((0, k * n), (n, n)).copy_from(b);
    }
    for r in n..dim {
        c[(r, r - n)] = 1.0;
    }
    spectral_radius(c)
}

fn spectral_radius(m: DMatrix<f64>) -> f64 {
    let dim = m.nrows();
    if let Some(schur) = Schur::try_new(m.clone(), f64::EPSILON, 1000 * dim.max(1)) {
        return schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    }
    // Gelfand's formula by repeated squaring with renormalization:
    // C^k = s_k M_k with |M_k| = 1, so ln ρ ≈ ln(s_k) / k
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    let mut unit = m / norm;
    let mut log_scale = norm.ln();
    let mut k = 1.0;
    for _ in 0..40 {
        let sq = &unit * &unit;
        let n2 = sq.norm();
        if n2 == 0.0 {
            return 0.0;
        }
        log_scale = 2.0 * log_scale + n2.ln();
        k *= 2.0;
        unit = sq / n2;
    }
    (log_scale / k).exp()
}

/// Lag features for row `t` of a T×N state history.
fn lags(x: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let n = x.ncols();
    DMatrix::from_fn(n, 3, |i, c| match c {
        0 => x[(t - 1, i)],
        1 => (2..=5).map(|k| x[(t - k, i)]).sum::<f64>() / 4.0,
        _ => (6..=22).map(|k| x[(t - k, i)]).sum::<f64>() / 17.0,
    })
}

fn steady_state(spec: &SyntheticSpec, ops: &GraphOperators) -> Result<DVector<f64>> {
    let n = spec.adjacency.n();
    if let ModelParams::Linear(_) = &spec.coefficients {
        let total: DMatrix<f64> = lag_blocks(spec).iter().sum();
        let lhs = DMatrix::<f64>::identity(n, n) - total;
        return lhs
            .lu()
            .solve(spec.coefficients.alpha())
            .ok_or(Error::UnstableDgp { radius: 1.0 });
    }
    let mut x = spec.coefficients.alpha().clone();
    for _ in 0..100_000 {
        let v = DMatrix::from_fn(n, 3, |i, _| x[i]);
        let next = spec.coefficients.predict(&v, ops)?;
        let step = (&next - &x).amax();
        x = next;
        if step <= 1e-15 * (1.0 + x.amax()) {
            return Ok(x);
        }
    }
    Err(Error::Degenerate(
        "noise-free recursion has no reachable steady state".into(),
    ))
}

fn return_covariance(a: &Adjacency, coupling: f64) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&coupling) {
        return Err(Error::InvalidInput(format!(
            "return coupling must be in [0, 1), got {coupling}"
        )));
    }
    let n = a.n();
    let precision = DMatrix::<f64>::identity(n, n) - normalize(a).matrix() * coupling;
    let cov = precision
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("return precision is singular".into()))?;
    let d = DVector::from_fn(n, |i, _| cov[(i, i)].sqrt());
    Ok(DMatrix::from_fn(n, n, |i, j| cov[(i, j)] / (d[i] * d[j])))
}

pub fn generate_synthetic_panel(spec: &SyntheticSpec) -> Result<SyntheticPanel> {
    let n = spec.adjacency.n();
    if n == 0 || spec.n_days == 0 {
        return Err(Error::InvalidInput(
            "synthetic panel needs at least one asset and one day".into(),
        ));
    }
    if spec.coefficients.alpha().len() != n {
        return Err(Error::Shape(format!(
            "{} intercepts for a {n}-node graph",
            spec.coefficients.alpha().len()
        )));
    }
    if !(spec.noise_scale >= 0.0) || !spec.noise_scale.is_finite() {
        return Err(Error::InvalidInput(format!(
            "noise scale must be nonnegative, got {}",
            spec.noise_scale
        )));
    }
    let radius = companion_spectral_radius(spec);
    if !(radius < 1.0) {
        return Err(Error::UnstableDgp { radius });
    }
    let ops = GraphOperators::new(&spec.adjacency);
    let start = steady_state(spec, &ops)?;
    if spec.space == DgpSpace::Level && start.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::InvalidInput("level-space steady state must be positive".into()));
    }

    let total = HAR_LAGS + spec.burn_in + spec.n_days;
    let mut x = DMatrix::<f64>::zeros(total, n);
    for t in 0..HAR_LAGS {
        x.row_mut(t).copy_from(&start.transpose());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigma = spec.noise_scale;
    for t in HAR_LAGS..total {
        let mean = spec.coefficients.predict(&lags(&x, t), &ops)?;
        for i in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[(t, i)] = match spec.space {
                DgpSpace::Log => mean[i] + sigma * e,
                DgpSpace::Level => {
                    if !(mean[i] > 0.0) {
                        return Err(Error::Degenerate(format!(
                            "conditional mean {} for asset {i} at step {t} is not positive",
                            mean[i]
                        )));
                    }
                    mean[i] * (sigma * e - 0.5 * sigma * sigma).exp()
                }
            };
        }
    }
    let skip = HAR_LAGS + spec.burn_in;
    let rv = DMatrix::from_fn(spec.n_days, n, |r, c| match spec.space {
        DgpSpace::Log => x[(skip + r, c)].exp(),
        DgpSpace::Level => x[(skip + r, c)],
    });

    let cov = return_covariance(&spec.adjacency, spec.return_coupling)?;
    let chol = Cholesky::new(cov.clone()).ok_or_else(|| Error::Degenerate("return covariance is not PD".into()))?;
    let l = chol.l();
    let mut returns = DMatrix::zeros(spec.n_days, n);
    for r in 0..spec.n_days {
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let y = &l * z;
        for c in 0..n {
            returns[(r, c)] = rv[(r, c)].sqrt() * y[c];
        }
    }
    let dates = business_days(spec.start_date, spec.n_days);
    let assets = (0..n).map(|i| format!("A{i:02}")).collect();
    Ok(SyntheticPanel {
        panel: RvPanel::new(dates, assets, rv)?,
        returns,
        return_covariance: cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GnnParams, LinearParams};

    fn linear(n: usize, alpha: f64, beta: [f64; 3], gamma: Option<[f64; 3]>) -> ModelParams {
        ModelParams::Linear(LinearParams {
            alpha: DVector::from_element(n, alpha),
            beta,
            gamma,
            delta: None,
        })
    }

    #[test]
    fn noise_free_start_at_fixed_point_stays_constant() {
        let spec = SyntheticSpec::new(Adjacency::path(4), linear(4, -1.0, [0.4, 0.3, 0.2], None), 0.0, 60, 1);
        let out = generate_synthetic_panel(&spec).unwrap();
        let want = (-1.0f64 / 0.1).exp();
        for v in out.panel.values().iter() {
            assert!((v / want - 1.0).abs() < 1e-9, "{v} vs {want}");
        }
    }

    #[test]
    fn level_space_noise_free_is_constant() {
        let mut spec = SyntheticSpec::new(Adjacency::path(3), linear(3, 0.5, [0.3, 0.2, 0.1], None), 0.0, 40, 1);
        spec.space = DgpSpace::Level;
        let out = generate_synthetic_panel(&spec).unwrap();
        for v in out.panel.values().iter() {
            assert!((v - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let spec = SyntheticSpec::new(
            Adjacency::path(5),
            linear(5, -0.8, [0.35, 0.3, 0.2], Some([0.05, 0.0, 0.0])),
            0.3,
            300,
            42,
        );
        let a = generate_synthetic_panel(&spec).unwrap();
        let b = generate_synthetic_panel(&spec).unwrap();
        assert_eq!(a.panel, b.panel);
        assert!(a
            .returns
            .iter()
            .zip(b.returns.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = generate_synthetic_panel(&SyntheticSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.panel, c.panel);
    }

    #[test]
    fn ar1_autocorrelation_matches_coefficient() {
        let phi = 0.6;
        let spec = SyntheticSpec::new(
            Adjacency::empty(2),
            linear(2, -3.0, [phi, 0.0, 0.0], None),
            0.5,
            10_000,
            7,
        );
        let out = generate_synthetic_panel(&spec).unwrap();
        for c in 0..2 {
            let x: Vec<f64> = out.panel.values().column(c).iter().map(|v| v.ln()).collect();
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let var: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
            let cov: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
            let rho = cov / var;
            assert!((rho - phi).abs() < 0.05, "lag-1 autocorrelation {rho}");
        }
    }

    #[test]
    fn explosive_coefficients_rejected() {
        let spec = SyntheticSpec::new(
            Adjacency::complete(3),
            linear(3, 0.1, [0.6, 0.3, 0.2], Some([0.2, 0.0, 0.0])),
            0.1,
            50,
            1,
        );
        assert!(matches!(generate_synthetic_panel(&spec), Err(Error::UnstableDgp { radius }) if radius >= 1.0));
    }

    #[test]
    fn gnn_level_panel_is_positive_and_finite() {
        let p = ModelParams::Gnn(GnnParams {
            alpha: DVector::from_element(4, 0.2),
            beta: [0.3, 0.2, 0.1],
            layers: vec![DMatrix::from_column_slice(3, 1, &[1.0, 0.0, -0.5])],
            gamma: DVector::from_element(1, 0.2),
        });
        let mut spec = SyntheticSpec::new(Adjacency::path(4), p, 0.4, 500, 3);
        spec.space = DgpSpace::Level;
        let out = generate_synthetic_panel(&spec).unwrap();
        assert!(out.panel.values().iter().all(|v| v.is_finite() && *v > 0.0));
        assert!(out.returns.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn return_precision_matches_graph() {
        let a = Adjacency::path(5);
        let cov = return_covariance(&a, 0.5).unwrap();
        let prec = cov.try_inverse().unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert_eq!(prec[(i, j)].abs() > 1e-10, a.has_edge(i, j), "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn calendar_skips_weekends() {
        let d = business_days(NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(), 3);
        assert_eq!(d[1], NaiveDate::from_ymd_opt(2021, 1, 4).unwrap());
    }
}

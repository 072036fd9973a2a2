//! Graphical lasso by block coordinate descent over the columns of the
//! working covariance, each column solved as a lasso by coordinate descent.
//!
//! Only off-diagonal entries of the precision matrix are penalized, so the
//! working covariance keeps the sample diagonal throughout.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use super::Adjacency;
use crate::error::{Error, Result};

/// |Θ_ij| above this marks an edge.
pub const SUPPORT_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    pub theta: DMatrix<f64>,
    /// Working covariance at convergence.
    pub covariance: DMatrix<f64>,
    pub penalty: f64,
    /// Penalized log-likelihood `log det Θ - tr(SΘ) - λ Σ_{i≠j} |Θ_ij|` at the returned Θ.
    pub objective: f64,
    /// Per-sweep upper bound `-log det W - n` on the penalized log-likelihood.
    /// Block updates never decrease `log det W`, so this sequence is nonincreasing.
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
}

impl PrecisionEstimate {
    pub fn support(&self) -> Adjacency {
        support_graph(&self.theta)
    }
}

fn support_graph(theta: &DMatrix<f64>) -> Adjacency {
    let n = theta.nrows();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if theta[(i, j)].abs() > SUPPORT_THRESHOLD || theta[(j, i)].abs() > SUPPORT_THRESHOLD {
                edges.push((i, j));
            }
        }
    }
    Adjacency::from_edges(n, &edges).expect("upper-triangle edges are valid")
}

struct Standardizer {
    mean: DVector<f64>,
    sd: DVector<f64>,
}

impl Standardizer {
    fn fit(x: &DMatrix<f64>) -> Result<Self> {
        let t = x.nrows() as f64;
        let n = x.ncols();
        let mut mean = DVector::zeros(n);
        let mut sd = DVector::zeros(n);
        for j in 0..n {
            let col = x.column(j);
            let m = col.sum() / t;
            let v = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t;
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::DegenerateCovariance { column: j });
            }
            mean[j] = m;
            sd[j] = v.sqrt();
        }
        Ok(Self { mean, sd })
    }

    /// Second-moment matrix of `x` after centering and scaling with the fitted moments.
    fn covariance(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let z = DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - self.mean[c]) / self.sd[c]);
        (z.transpose() * &z) / x.nrows() as f64
    }
}

/// Correlation matrix (MLE normalization) of the columns of `returns`.
pub fn empirical_covariance(returns: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if returns.nrows() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 observations, got {}",
            returns.nrows()
        )));
    }
    Ok(Standardizer::fit(returns)?.covariance(returns))
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn log_det(m: &DMatrix<f64>) -> Option<f64> {
    let c = Cholesky::new(m.clone())?;
    Some(2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

fn penalized_loglik(theta: &DMatrix<f64>, s: &DMatrix<f64>, penalty: f64) -> Option<f64> {
    let n = theta.nrows();
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off += theta[(i, j)].abs();
            }
        }
    }
    Some(log_det(theta)? - (s * theta).trace() - penalty * off)
}

/// Solves the penalized problem for a given covariance matrix `s`.
pub fn glasso_solve(s: &DMatrix<f64>, penalty: f64, tol: f64, max_iter: usize) -> Result<PrecisionEstimate> {
    let n = s.nrows();
    if n == 0 || s.ncols() != n {
        return Err(Error::Shape(format!(
            "covariance must be square and nonempty, got {}x{}",
            n,
            s.ncols()
        )));
    }
    if !(penalty >= 0.0) || !penalty.is_finite() {
        return Err(Error::InvalidInput(format!(
            "penalty must be nonnegative, got {penalty}"
        )));
    }
    for j in 0..n {
        if !(s[(j, j)] > 0.0) {
            return Err(Error::DegenerateCovariance { column: j });
        }
    }
    let inner_tol = (tol * 1e-3).max(1e-15);
    let mut w = s.clone();
    let mut beta = DMatrix::<f64>::zeros(n, n);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;

    while sweeps < max_iter {
        sweeps += 1;
        let w_old = w.clone();
        for j in 0..n {
            // coordinate descent on  1/2 b'W11 b - b's12 + λ|b|_1, warm-started
            for _ in 0..10_000 {
                let mut max_step: f64 = 0.0;
                for k in 0..n {
                    if k == j {
                        continue;
                    }
                    let mut r = s[(k, j)];
                    for l in 0..n {
                        if l != j && l != k {
                            r -= w[(k, l)] * beta[(l, j)];
                        }
                    }
                    let b = soft_threshold(r, penalty) / w[(k, k)];
                    max_step = max_step.max((b - beta[(k, j)]).abs());
                    beta[(k, j)] = b;
                }
                if max_step < inner_tol {
                    break;
                }
            }
            for k in 0..n {
                if k == j {
                    continue;
                }
                let mut w12 = 0.0;
                for l in 0..n {
                    if l != j {
                        w12 += w[(k, l)] * beta[(l, j)];
                    }
                }
                w[(k, j)] = w12;
                w[(j, k)] = w12;
            }
        }
        let ld = log_det(&w).ok_or_else(|| {
            Error::Degenerate(format!(
                "working covariance lost positive definiteness at sweep {sweeps}"
            ))
        })?;
        trace.push(-ld - n as f64);
        let change = (&w - &w_old).amax();
        if change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: sweeps,
            objective: trace.last().copied().unwrap_or(f64::NAN),
        });
    }

    let mut theta = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut quad = 0.0;
        for k in 0..n {
            if k != j {
                quad += w[(k, j)] * beta[(k, j)];
            }
        }
        let tjj = 1.0 / (w[(j, j)] - quad);
        theta[(j, j)] = tjj;
        for k in 0..n {
            if k != j {
                theta[(k, j)] = -beta[(k, j)] * tjj;
            }
        }
    }
    let theta = (&theta + theta.transpose()) * 0.5;
    let objective = penalized_loglik(&theta, s, penalty)
        .ok_or_else(|| Error::Degenerate("estimated precision matrix is not positive definite".into()))?;
    Ok(PrecisionEstimate {
        theta,
        covariance: w,
        penalty,
        objective,
        objective_trace: trace,
        sweeps,
    })
}

/// Graphical lasso on column-standardized returns.
pub fn glasso_fit(returns: &DMatrix<f64>, penalty: f64, tol: f64, max_iter: usize) -> Result<PrecisionEstimate> {
    let s = empirical_covariance(returns)?;
    glasso_solve(&s, penalty, tol, max_iter)
}

/// `count` log-spaced penalties from `0.01 * λ_max` to `λ_max`, where `λ_max`
/// is the largest off-diagonal absolute entry of `s`.
pub fn default_penalty_grid(s: &DMatrix<f64>, count: usize) -> Vec<f64> {
    let n = s.nrows();
    let mut lmax: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lmax = lmax.max(s[(i, j)].abs());
            }
        }
    }
    if count <= 1 || lmax == 0.0 {
        return vec![lmax];
    }
    let (lo, hi) = ((0.01 * lmax).ln(), lmax.ln());
    (0..count)
        .map(|k| (lo + (hi - lo) * k as f64 / (count - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlassoCvConfig {
    /// Explicit penalties; `None` uses [`default_penalty_grid`] with `grid_size` points.
    pub penalty_grid: Option<Vec<f64>>,
    pub grid_size: usize,
    pub folds: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub rule: CvRule,
}

impl Default for GlassoCvConfig {
    fn default() -> Self {
        Self {
            penalty_grid: None,
            grid_size: 20,
            folds: 5,
            tol: 1e-6,
            max_iter: 500,
            rule: CvRule::OneStandardError,
        }
    }
}

/// How the penalty is picked from the cross-validation curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvRule {
    /// Highest mean held-out log-likelihood.
    BestMean,
    /// Largest penalty whose mean score is within one standard error
    /// (across folds) of the best mean.
    OneStandardError,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvPoint {
    pub penalty: f64,
    /// Mean held-out log-likelihood over folds.
    pub mean: f64,
    /// Standard error of the mean over folds.
    pub std_error: f64,
}

#[derive(Debug, Clone)]
pub struct GraphSelection {
    pub adjacency: Adjacency,
    pub penalty: f64,
    pub cv_scores: Vec<CvPoint>,
    pub estimate: PrecisionEstimate,
}

fn select_penalty(points: &[CvPoint], rule: CvRule) -> f64 {
    // ties go to the larger (sparser) penalty
    let best = points
        .iter()
        .copied()
        .reduce(|b, p| {
            if p.mean > b.mean || (p.mean == b.mean && p.penalty > b.penalty) {
                p
            } else {
                b
            }
        })
        .expect("grid is nonempty");
    match rule {
        CvRule::BestMean => best.penalty,
        CvRule::OneStandardError => points
            .iter()
            .filter(|p| p.penalty >= best.penalty && p.mean >= best.mean - best.std_error)
            .map(|p| p.penalty)
            .fold(best.penalty, f64::max),
    }
}

fn fold_ranges(t: usize, folds: usize) -> Vec<std::ops::Range<usize>> {
    (0..folds).map(|k| (k * t / folds)..((k + 1) * t / folds)).collect()
}

fn select_rows(x: &DMatrix<f64>, rows: impl Iterator<Item = usize>) -> DMatrix<f64> {
    let rows: Vec<usize> = rows.collect();
    DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)])
}

/// Cross-validated GLASSO graph. Folds are contiguous time blocks; each
/// penalty is scored by the held-out Gaussian log-likelihood
/// `log det Θ - tr(S_hold Θ)` over folds and picked according to `cfg.rule`.
pub fn glasso_graph(returns: &DMatrix<f64>, cfg: &GlassoCvConfig) -> Result<GraphSelection> {
    if cfg.folds < 2 {
        return Err(Error::InvalidInput(format!(
            "cross-validation needs at least 2 folds, got {}",
            cfg.folds
        )));
    }
    let t = returns.nrows();
    if t < 2 * cfg.folds {
        return Err(Error::InvalidInput(format!(
            "{t} observations are too few for {} folds",
            cfg.folds
        )));
    }
    let full_s = empirical_covariance(returns)?;
    let grid = match &cfg.penalty_grid {
        Some(g) if g.is_empty() => return Err(Error::InvalidInput("penalty grid is empty".into())),
        Some(g) => g.clone(),
        None => default_penalty_grid(&full_s, cfg.grid_size),
    };

    let mut splits = Vec::with_capacity(cfg.folds);
    for hold in fold_ranges(t, cfg.folds) {
        let train = select_rows(returns, (0..t).filter(|r| !hold.contains(r)));
        let test = select_rows(returns, hold.clone());
        let std = Standardizer::fit(&train)?;
        splits.push((std.covariance(&train), std.covariance(&test)));
    }

    let scores: Vec<Result<CvPoint>> = grid
        .par_iter()
        .map(|&lam| {
            let mut fold_scores = Vec::with_capacity(splits.len());
            for (k, (s_train, s_test)) in splits.iter().enumerate() {
                let est = glasso_solve(s_train, lam, cfg.tol, cfg.max_iter)
                    .map_err(|e| e.with_context(format!("fold {k}, penalty {lam}")))?;
                let ld = log_det(&est.theta).ok_or_else(|| Error::Degenerate("non-PD fold estimate".into()))?;
                fold_scores.push(ld - (s_test * &est.theta).trace());
            }
            let f = fold_scores.len() as f64;
            let mean = fold_scores.iter().sum::<f64>() / f;
            let var = fold_scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (f - 1.0);
            Ok(CvPoint {
                penalty: lam,
                mean,
                std_error: (var / f).sqrt(),
            })
        })
        .collect();
    let cv_scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let penalty = select_penalty(&cv_scores, cfg.rule);
    let estimate = glasso_solve(&full_s, penalty, cfg.tol, cfg.max_iter)?;
    Ok(GraphSelection {
        adjacency: estimate.support(),
        penalty,
        cv_scores,
        estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn gaussian_sample(precision: &DMatrix<f64>, t: usize, seed: u64) -> DMatrix<f64> {
        let n = precision.nrows();
        let cov = precision.clone().try_inverse().unwrap();
        let l = Cholesky::new(cov).unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(t, n);
        for r in 0..t {
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let y = &l * z;
            for c in 0..n {
                x[(r, c)] = y[c];
            }
        }
        x
    }

    fn max_offdiag(s: &DMatrix<f64>) -> f64 {
        let n = s.nrows();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s[(i, j)].abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn saturated_penalty_gives_diagonal() {
        let prec = DMatrix::from_fn(4, 4, |i, j| match (i as i64 - j as i64).abs() {
            0 => 1.0,
            1 => 0.4,
            _ => 0.0,
        });
        let x = gaussian_sample(&prec, 500, 1);
        let s = empirical_covariance(&x).unwrap();
        let est = glasso_solve(&s, max_offdiag(&s), 1e-8, 100).unwrap();
        assert_eq!(est.support().n_edges(), 0);
        for i in 0..4 {
            assert!((est.theta[(i, i)] - 1.0 / s[(i, i)]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_penalty_inverts_covariance() {
        let x = gaussian_sample(&DMatrix::identity(5, 5), 400, 2);
        let s = empirical_covariance(&x).unwrap();
        let est = glasso_solve(&s, 0.0, 1e-10, 200).unwrap();
        let inv = s.clone().try_inverse().unwrap();
        assert!((&est.theta - inv).amax() < 1e-8);
    }

    #[test]
    fn independent_blocks_have_no_cross_edges() {
        let mut prec = DMatrix::identity(4, 4);
        for (i, j) in [(0, 1), (2, 3)] {
            prec[(i, j)] = 0.45;
            prec[(j, i)] = 0.45;
        }
        let x = gaussian_sample(&prec, 3000, 3);
        let s = empirical_covariance(&x).unwrap();
        // cross-block sample correlations are the largest off-block entries;
        // any penalty above them removes the cross edges
        let cross = [(0, 2), (0, 3), (1, 2), (1, 3)]
            .iter()
            .map(|&(i, j)| s[(i, j)].abs())
            .fold(0.0, f64::max);
        let est = glasso_solve(&s, cross + 0.02, 1e-8, 200).unwrap();
        let a = est.support();
        assert!(a.has_edge(0, 1) && a.has_edge(2, 3));
        for (i, j) in [(0, 2), (0, 3), (1, 2), (1, 3)] {
            assert!(!a.has_edge(i, j));
        }
    }

    #[test]
    fn objective_trace_is_nonincreasing_and_estimate_is_pd() {
        let prec = DMatrix::from_fn(8, 8, |i, j| match (i as i64 - j as i64).abs() {
            0 => 1.0,
            1 => 0.35,
            _ => 0.0,
        });
        let x = gaussian_sample(&prec, 300, 4);
        let s = empirical_covariance(&x).unwrap();
        for lam in [0.01, 0.05, 0.1, 0.3] {
            let est = glasso_solve(&s, lam, 1e-10, 500).unwrap();
            for w in est.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "trace increased: {w:?}");
            }
            assert!(Cholesky::new(est.theta.clone()).is_some());
            assert!((&est.theta - est.theta.transpose()).amax() < 1e-12);
            // the bound closes onto the primal objective at convergence
            let last = *est.objective_trace.last().unwrap();
            assert!(
                (last - est.objective).abs() < 1e-5 * (1.0 + last.abs()),
                "{last} vs {}",
                est.objective
            );
        }
    }

    #[test]
    fn degenerate_column_rejected() {
        let mut x = gaussian_sample(&DMatrix::identity(3, 3), 50, 5);
        x.column_mut(1).fill(2.0);
        assert!(matches!(
            glasso_fit(&x, 0.1, 1e-6, 100),
            Err(Error::DegenerateCovariance { column: 1 })
        ));
    }

    #[test]
    fn non_convergence_reports_objective() {
        let prec = DMatrix::from_fn(6, 6, |i, j| {
            if i == j {
                1.0
            } else if (i as i64 - j as i64).abs() == 1 {
                0.4
            } else {
                0.0
            }
        });
        let x = gaussian_sample(&prec, 200, 6);
        match glasso_fit(&x, 0.01, 1e-14, 1) {
            Err(Error::NonConvergence {
                iterations: 1,
                objective,
            }) => assert!(objective.is_finite()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_fold_rejected() {
        let x = gaussian_sample(&DMatrix::identity(3, 3), 100, 7);
        let cfg = GlassoCvConfig {
            folds: 1,
            ..Default::default()
        };
        assert!(glasso_graph(&x, &cfg).is_err());
    }

    #[test]
    fn cv_graph_is_valid_adjacency() {
        let prec = DMatrix::from_fn(6, 6, |i, j| {
            if i == j {
                1.0
            } else if (i as i64 - j as i64).abs() == 1 {
                0.4
            } else {
                0.0
            }
        });
        let x = gaussian_sample(&prec, 800, 8);
        let sel = glasso_graph(&x, &GlassoCvConfig::default()).unwrap();
        let m = sel.adjacency.to_matrix();
        assert_eq!(m, m.transpose());
        assert!(m.diagonal().iter().all(|&d| d == 0.0));
        assert_eq!(sel.cv_scores.len(), 20);
    }
}

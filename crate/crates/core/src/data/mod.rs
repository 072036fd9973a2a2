//! Realized-volatility panels, HAR lag features and multi-horizon targets.
//!
//! Panels are stored wide (T days by N assets) and are immutable once built.
//! All RV values are raw squared log returns; any rescaling for display
//! happens in the report layer.

mod io;
mod rv;
mod synth;

pub use io::{
    load_index_rv, load_intraday, load_returns, load_rv_panel, write_index_rv, write_returns, write_rv_panel, IndexRv,
};
pub use rv::{compute_daily_rv, IntradaySeries};
pub use synth::{
    business_days, companion_spectral_radius, generate_synthetic_panel, DgpSpace, SyntheticPanel, SyntheticSpec,
};

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Number of prior days consumed by the monthly HAR component.
pub const HAR_LAGS: usize = 22;

/// Daily realized volatilities, one row per date and one column per asset.
#[derive(Debug, Clone, PartialEq)]
pub struct RvPanel {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    values: DMatrix<f64>,
}

impl RvPanel {
    pub fn new(dates: Vec<NaiveDate>, assets: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != dates.len() || values.ncols() != assets.len() {
            return Err(Error::Shape(format!(
                "panel values are {}x{} but there are {} dates and {} assets",
                values.nrows(),
                values.ncols(),
                dates.len(),
                assets.len()
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "dates must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        for (r, c) in (0..values.nrows()).flat_map(|r| (0..values.ncols()).map(move |c| (r, c))) {
            let v = values[(r, c)];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "RV for {} on {} is {v}; values must be finite and nonnegative",
                    assets[c], dates[r]
                )));
            }
        }
        Ok(Self { dates, assets, values })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    /// Rows `0..end`, used to check that forecasts never look past their origin.
    pub fn truncated(&self, end: usize) -> RvPanel {
        let end = end.min(self.n_days());
        RvPanel {
            dates: self.dates[..end].to_vec(),
            assets: self.assets.clone(),
            values: self.values.rows(0, end).into_owned(),
        }
    }

    pub fn scaled(&self, factor: f64) -> RvPanel {
        RvPanel {
            dates: self.dates.clone(),
            assets: self.assets.clone(),
            values: &self.values * factor,
        }
    }
}

/// HAR regressors for one forecast origin: columns are the previous day's RV,
/// the average over days t-5..t-2 and the average over days t-22..t-6.
#[derive(Debug, Clone, PartialEq)]
pub struct LagFeatures {
    pub origin: usize,
    pub matrix: DMatrix<f64>,
}

impl LagFeatures {
    pub fn n_assets(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Cumulative targets `RV_{t:t+h}`; row t sums days t..=t+h.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPanel {
    pub horizon: usize,
    pub dates: Vec<NaiveDate>,
    pub values: DMatrix<f64>,
}

/// Lag features at row index `t` (the origin); only rows strictly before `t` are read.
pub fn build_lag_features(panel: &RvPanel, t: usize) -> Result<LagFeatures> {
    if t < HAR_LAGS {
        return Err(Error::InsufficientHistory {
            origin: t,
            required: HAR_LAGS,
        });
    }
    if t > panel.n_days() {
        return Err(Error::InvalidInput(format!(
            "origin {t} is beyond the end of a {}-day panel",
            panel.n_days()
        )));
    }
    let v = panel.values();
    let n = panel.n_assets();
    let mut m = DMatrix::zeros(n, 3);
    for i in 0..n {
        let daily = v[(t - 1, i)];
        let weekly = (2..=5).map(|k| v[(t - k, i)]).sum::<f64>() / 4.0;
        let monthly = (6..=22).map(|k| v[(t - k, i)]).sum::<f64>() / 17.0;
        m[(i, 0)] = daily;
        m[(i, 1)] = weekly;
        m[(i, 2)] = monthly;
    }
    Ok(LagFeatures { origin: t, matrix: m })
}

pub fn build_horizon_targets(panel: &RvPanel, h: usize) -> Result<TargetPanel> {
    let t_len = panel.n_days();
    if h >= t_len {
        return Err(Error::EmptyTarget {
            horizon: h,
            rows: t_len,
        });
    }
    let rows = t_len - h;
    let v = panel.values();
    let out = DMatrix::from_fn(rows, panel.n_assets(), |t, j| {
        (0..=h).map(|k| v[(t + k, j)]).sum::<f64>()
    });
    Ok(TargetPanel {
        horizon: h,
        dates: panel.dates()[..rows].to_vec(),
        values: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    pub(crate) fn panel_from(values: DMatrix<f64>) -> RvPanel {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let dates = (0..values.nrows()).map(|i| start + Duration::days(i as i64)).collect();
        let assets = (0..values.ncols()).map(|j| format!("A{j}")).collect();
        RvPanel::new(dates, assets, values).unwrap()
    }

    #[test]
    fn constant_panel_gives_constant_features() {
        let p = panel_from(DMatrix::from_element(30, 3, 2.5));
        let f = build_lag_features(&p, 25).unwrap();
        for x in f.matrix.iter() {
            assert!((x - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn ramp_history_features() {
        // RV_{t-22..t-1} = 1..22
        let p = panel_from(DMatrix::from_fn(22, 1, |r, _| (r + 1) as f64));
        let f = build_lag_features(&p, 22).unwrap();
        assert_eq!(f.matrix[(0, 0)], 22.0);
        assert_eq!(f.matrix[(0, 1)], 19.5);
        assert_eq!(f.matrix[(0, 2)], 9.0);
    }

    #[test]
    fn lag_boundary() {
        let p = panel_from(DMatrix::from_element(22, 2, 1.0));
        assert!(build_lag_features(&p, 22).is_ok());
        assert!(matches!(
            build_lag_features(&p, 21),
            Err(Error::InsufficientHistory { origin: 21, .. })
        ));
    }

    #[test]
    fn horizon_targets_of_ones() {
        let p = panel_from(DMatrix::from_element(40, 2, 1.0));
        let t0 = build_horizon_targets(&p, 0).unwrap();
        assert_eq!(&t0.values, p.values());
        let t4 = build_horizon_targets(&p, 4).unwrap();
        assert_eq!(t4.values.nrows(), 36);
        assert!(t4.values.iter().all(|&x| x == 5.0));
        let t21 = build_horizon_targets(&p, 21).unwrap();
        assert!(t21.values.iter().all(|&x| x == 22.0));
    }

    #[test]
    fn horizon_too_long() {
        let p = panel_from(DMatrix::from_element(5, 1, 1.0));
        assert!(matches!(build_horizon_targets(&p, 5), Err(Error::EmptyTarget { .. })));
    }

    #[test]
    fn panel_rejects_negative() {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let r = RvPanel::new(vec![start], vec!["X".into()], DMatrix::from_element(1, 1, -1.0));
        assert!(r.is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_panel() -> impl Strategy<Value = DMatrix<f64>> {
            (23usize..40, 1usize..4).prop_flat_map(|(t, n)| {
                proptest::collection::vec(0.0f64..10.0, t * n).prop_map(move |v| DMatrix::from_vec(t, n, v))
            })
        }

        proptest! {
            #[test]
            fn lag_features_are_linear(m in arb_panel(), a in 0.01f64..100.0) {
                let p = panel_from(m);
                let t = p.n_days();
                let f = build_lag_features(&p, t).unwrap();
                let g = build_lag_features(&p.scaled(a), t).unwrap();
                for (x, y) in f.matrix.iter().zip(g.matrix.iter()) {
                    prop_assert!((a * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                    prop_assert!(*x >= 0.0);
                }
            }

            #[test]
            fn horizon_targets_telescope(m in arb_panel(), h in 0usize..22) {
                let p = panel_from(m);
                let tp = build_horizon_targets(&p, h).unwrap();
                for t in 0..tp.values.nrows() {
                    for j in 0..p.n_assets() {
                        let mut naive = 0.0;
                        for k in 0..=h {
                            naive += p.values()[(t + k, j)];
                        }
                        prop_assert!((tp.values[(t, j)] - naive).abs() <= 1e-10 * (1.0 + naive));
                    }
                }
            }
        }
    }
}

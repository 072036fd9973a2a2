use chrono::NaiveDate;

use crate::error::{Error, Result};

/// One asset's intraday prices for a single trading day.
///
/// Times are minutes from the session open.
#[derive(Debug, Clone, PartialEq)]
pub struct IntradaySeries {
    pub asset: String,
    pub day: NaiveDate,
    prices: Vec<(u32, f64)>,
}

impl IntradaySeries {
    pub fn new(asset: impl Into<String>, day: NaiveDate, prices: Vec<(u32, f64)>) -> Result<Self> {
        let asset = asset.into();
        if prices.len() < 2 {
            return Err(Error::InsufficientData {
                asset,
                day: day.to_string(),
                reason: format!("{} observations, need at least 2", prices.len()),
            });
        }
        if prices.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidInput(format!(
                "intraday times for {asset} on {day} are not strictly increasing"
            )));
        }
        if let Some(&(m, p)) = prices.iter().find(|(_, p)| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "price {p} at minute {m} for {asset} on {day} is not positive"
            )));
        }
        Ok(Self { asset, day, prices })
    }

    pub fn prices(&self) -> &[(u32, f64)] {
        &self.prices
    }

    pub fn first_minute(&self) -> u32 {
        self.prices[0].0
    }

    pub fn last_minute(&self) -> u32 {
        self.prices[self.prices.len() - 1].0
    }

    /// Last observed price at or before `minute`.
    fn last_tick(&self, minute: u32) -> Option<f64> {
        let idx = self.prices.partition_point(|&(m, _)| m <= minute);
        (idx > 0).then(|| self.prices[idx - 1].1)
    }

    fn insufficient(&self, reason: String) -> Error {
        Error::InsufficientData {
            asset: self.asset.clone(),
            day: self.day.to_string(),
            reason,
        }
    }
}

/// Subsample-averaged realized variance.
///
/// For each offset `s` in `0..delta/base` the series is sampled on the grid
/// `s*base, s*base + delta, ...` (grid anchored at the open, last-tick
/// sampling) and the squared log returns are summed; the result is the mean
/// over offsets. `base == delta` gives the plain non-overlapping estimator.
pub fn compute_daily_rv(series: &IntradaySeries, delta_minutes: u32, base_minutes: u32) -> Result<f64> {
    if delta_minutes == 0 || base_minutes == 0 || !delta_minutes.is_multiple_of(base_minutes) {
        return Err(Error::InvalidInput(format!(
            "sampling interval {delta_minutes} must be a positive multiple of base {base_minutes}"
        )));
    }
    let first = series.first_minute();
    let last = series.last_minute();
    if last - first < delta_minutes {
        return Err(series.insufficient(format!(
            "series spans {} minutes, less than the {delta_minutes}-minute interval",
            last - first
        )));
    }
    let offsets = delta_minutes / base_minutes;
    let mut total = 0.0;
    for s in 0..offsets {
        let mut grid = s * base_minutes;
        let mut prev: Option<f64> = None;
        let mut points = 0usize;
        let mut rv = 0.0;
        while grid <= last {
            if let Some(p) = series.last_tick(grid) {
                let lp = p.ln();
                if let Some(q) = prev {
                    let r = lp - q;
                    rv += r * r;
                }
                prev = Some(lp);
                points += 1;
            }
            grid += delta_minutes;
        }
        if points < 2 {
            return Err(series.insufficient(format!(
                "offset {} min yields {points} grid points, need at least 2",
                s * base_minutes
            )));
        }
        total += rv;
    }
    Ok(total / offsets as f64)
}

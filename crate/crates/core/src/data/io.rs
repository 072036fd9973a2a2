//! CSV readers and writers for RV panels, returns, index RV and intraday prices.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;

use super::rv::IntradaySeries;
use super::RvPanel;
use crate::error::{Error, Result};

/// Univariate daily RV of a market index, used for regime stratification.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexRv {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl IndexRv {
    pub fn get(&self, date: NaiveDate) -> Option<f64> {
        self.dates.binary_search(&date).ok().map(|i| self.values[i])
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn check_header(rdr: &mut csv::Reader<std::fs::File>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        field: "header".into(),
        message: e.to_string(),
    })?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            field: "header".into(),
            message: format!("expected `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn parse_date(s: &str, line: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| Error::Parse {
        line,
        field: "date".into(),
        message: format!("`{s}`: {e}"),
    })
}

fn parse_number(s: &str, line: usize, field: &str) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        line,
        field: field.into(),
        message: format!("`{s}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            field: field.into(),
            message: format!("`{s}` is not finite"),
        });
    }
    Ok(v)
}

fn records(rdr: &mut csv::Reader<std::fs::File>) -> impl Iterator<Item = Result<(usize, csv::StringRecord)>> + '_ {
    rdr.records().map(|r| {
        let rec = r.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            field: "record".into(),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        Ok((line, rec))
    })
}

/// Long `date,asset,<value>` table pivoted to a rectangular T x N matrix.
fn load_long(path: &Path, value_field: &str, nonnegative: bool) -> Result<(Vec<NaiveDate>, Vec<String>, DMatrix<f64>)> {
    let mut rdr = open_reader(path)?;
    check_header(&mut rdr, &["date", "asset", value_field])?;
    let mut cells: BTreeMap<(NaiveDate, String), f64> = BTreeMap::new();
    for item in records(&mut rdr) {
        let (line, rec) = item?;
        let date = parse_date(&rec[0], line)?;
        let asset = rec[1].to_string();
        if asset.is_empty() {
            return Err(Error::Parse {
                line,
                field: "asset".into(),
                message: "empty asset symbol".into(),
            });
        }
        let v = parse_number(&rec[2], line, value_field)?;
        if nonnegative && v < 0.0 {
            return Err(Error::Parse {
                line,
                field: value_field.into(),
                message: format!("negative value {v} in row {line}"),
            });
        }
        if cells.insert((date, asset.clone()), v).is_some() {
            return Err(Error::Parse {
                line,
                field: "date,asset".into(),
                message: format!("duplicate key ({date}, {asset})"),
            });
        }
    }
    let dates: Vec<NaiveDate> = cells
        .keys()
        .map(|(d, _)| *d)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let assets: Vec<String> = cells
        .keys()
        .map(|(_, a)| a.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if dates.is_empty() {
        return Err(Error::Parse {
            line: 1,
            field: "record".into(),
            message: "file has no data rows".into(),
        });
    }
    let mut values = DMatrix::zeros(dates.len(), assets.len());
    let mut missing = Vec::new();
    for (r, d) in dates.iter().enumerate() {
        for (c, a) in assets.iter().enumerate() {
            match cells.get(&(*d, a.clone())) {
                Some(v) => values[(r, c)] = *v,
                None => missing.push(format!("({d}, {a})")),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::PanelHole {
            missing: missing.len(),
            first: missing.iter().take(5).cloned().collect::<Vec<_>>().join(" "),
        });
    }
    Ok((dates, assets, values))
}

/// Reads `date,asset,rv`. Assets are ordered by symbol.
pub fn load_rv_panel(path: impl AsRef<Path>) -> Result<RvPanel> {
    let (dates, assets, values) = load_long(path.as_ref(), "rv", true)?;
    RvPanel::new(dates, assets, values)
}

/// Reads daily log returns in `date,asset,ret` layout.
pub fn load_returns(path: impl AsRef<Path>) -> Result<(Vec<NaiveDate>, Vec<String>, DMatrix<f64>)> {
    load_long(path.as_ref(), "ret", false)
}

pub fn load_index_rv(path: impl AsRef<Path>) -> Result<IndexRv> {
    let mut rdr = open_reader(path.as_ref())?;
    check_header(&mut rdr, &["date", "rv"])?;
    let mut rows: BTreeMap<NaiveDate, f64> = BTreeMap::new();
    for item in records(&mut rdr) {
        let (line, rec) = item?;
        let date = parse_date(&rec[0], line)?;
        let v = parse_number(&rec[1], line, "rv")?;
        if v < 0.0 {
            return Err(Error::Parse {
                line,
                field: "rv".into(),
                message: format!("negative value {v} in row {line}"),
            });
        }
        if rows.insert(date, v).is_some() {
            return Err(Error::Parse {
                line,
                field: "date".into(),
                message: format!("duplicate date {date}"),
            });
        }
    }
    Ok(IndexRv {
        dates: rows.keys().copied().collect(),
        values: rows.values().copied().collect(),
    })
}

/// Reads `date,asset,minute,price`, one series per (date, asset).
pub fn load_intraday(path: impl AsRef<Path>) -> Result<Vec<IntradaySeries>> {
    let mut rdr = open_reader(path.as_ref())?;
    check_header(&mut rdr, &["date", "asset", "minute", "price"])?;
    // (minute, price, source line) per (day, asset)
    type Ticks = Vec<(u32, f64, usize)>;
    let mut groups: BTreeMap<(NaiveDate, String), Ticks> = BTreeMap::new();
    for item in records(&mut rdr) {
        let (line, rec) = item?;
        let date = parse_date(&rec[0], line)?;
        let minute: u32 = rec[2].parse().map_err(|_| Error::Parse {
            line,
            field: "minute".into(),
            message: format!("`{}` is not a nonnegative integer", &rec[2]),
        })?;
        let price = parse_number(&rec[3], line, "price")?;
        if price <= 0.0 {
            return Err(Error::Parse {
                line,
                field: "price".into(),
                message: format!("nonpositive price {price}"),
            });
        }
        groups
            .entry((date, rec[1].to_string()))
            .or_default()
            .push((minute, price, line));
    }
    groups
        .into_iter()
        .map(|((date, asset), mut obs)| {
            obs.sort_by_key(|o| o.0);
            if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::Parse {
                    line: w[1].2,
                    field: "minute".into(),
                    message: format!("duplicate minute {} for ({date}, {asset})", w[1].0),
                });
            }
            IntradaySeries::new(asset, date, obs.into_iter().map(|(m, p, _)| (m, p)).collect())
        })
        .collect()
}

fn write_long(
    path: &Path,
    value_field: &str,
    dates: &[NaiveDate],
    assets: &[String],
    values: &DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["date", "asset", value_field]).map_err(io)?;
    for (r, d) in dates.iter().enumerate() {
        for (c, a) in assets.iter().enumerate() {
            w.write_record([d.to_string(), a.clone(), values[(r, c)].to_string()])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_rv_panel(path: impl AsRef<Path>, panel: &RvPanel) -> Result<()> {
    write_long(path.as_ref(), "rv", panel.dates(), panel.assets(), panel.values())
}

pub fn write_returns(
    path: impl AsRef<Path>,
    dates: &[NaiveDate],
    assets: &[String],
    returns: &DMatrix<f64>,
) -> Result<()> {
    write_long(path.as_ref(), "ret", dates, assets, returns)
}

pub fn write_index_rv(path: impl AsRef<Path>, index: &IndexRv) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["date", "rv"]).map_err(io)?;
    for (d, v) in index.dates.iter().zip(&index.values) {
        w.write_record([d.to_string(), v.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

//! Edge-list import/export and shortest-path-distance frequency reports.

use std::collections::BTreeMap;
use std::path::Path;

use super::{shortest_path_distances, Adjacency};
use crate::error::{Error, Result};

/// Writes upper-triangle edges as `i,j` asset-symbol pairs.
pub fn write_edge_list(path: impl AsRef<Path>, a: &Adjacency, assets: &[String]) -> Result<()> {
    let path = path.as_ref();
    if assets.len() != a.n() {
        return Err(Error::Shape(format!(
            "{} symbols for a {}-node graph",
            assets.len(),
            a.n()
        )));
    }
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["i", "j"]).map_err(io)?;
    for (i, j) in a.edges() {
        w.write_record([&assets[i], &assets[j]]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an `i,j` edge list; symbols are resolved against `assets`.
pub fn read_edge_list(path: impl AsRef<Path>, assets: &[String]) -> Result<Adjacency> {
    let path = path.as_ref();
    let index: BTreeMap<&str, usize> = assets.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        field: "header".into(),
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != ["i", "j"] {
        return Err(Error::Parse {
            line: 1,
            field: "header".into(),
            message: "expected `i,j`".into(),
        });
    }
    let mut edges = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            field: "record".into(),
            message: e.to_string(),
        })?;
        let mut ends = [0usize; 2];
        for (slot, field) in ["i", "j"].iter().enumerate() {
            let sym = rec.get(slot).unwrap_or("");
            ends[slot] = *index.get(sym).ok_or_else(|| Error::Parse {
                line,
                field: (*field).into(),
                message: format!("unknown asset `{sym}`"),
            })?;
        }
        if ends[0] == ends[1] {
            return Err(Error::Parse {
                line,
                field: "j".into(),
                message: "self-loops are not allowed".into(),
            });
        }
        edges.push((ends[0], ends[1]));
    }
    Adjacency::from_edges(assets.len(), &edges)
}

/// Share of unordered node pairs at each shortest-path distance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFrequency {
    /// (distance, percentage of pairs), ascending in distance.
    pub finite: Vec<(usize, f64)>,
    /// Percentage of disconnected pairs.
    pub unreachable: f64,
}

pub fn spd_frequency(a: &Adjacency) -> SpdFrequency {
    let n = a.n();
    let d = shortest_path_distances(a);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut unreachable = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            match d.get(i, j) {
                Some(k) => *counts.entry(k).or_default() += 1,
                None => unreachable += 1,
            }
        }
    }
    let pairs = (n * n.saturating_sub(1) / 2).max(1) as f64;
    SpdFrequency {
        finite: counts.into_iter().map(|(k, c)| (k, 100.0 * c as f64 / pairs)).collect(),
        unreachable: 100.0 * unreachable as f64 / pairs,
    }
}

/// Writes `spd,frequency_pct`; disconnected pairs appear as `inf` when present.
pub fn write_spd_report(path: impl AsRef<Path>, freq: &SpdFrequency) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["spd", "frequency_pct"]).map_err(io)?;
    for (k, pct) in &freq.finite {
        w.write_record([k.to_string(), pct.to_string()]).map_err(io)?;
    }
    if freq.unreachable > 0.0 {
        w.write_record(["inf".to_string(), freq.unreachable.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

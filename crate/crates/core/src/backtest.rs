//! Rolling-window backtests: calendar-month windows, per-window graph
//! estimation and model fitting, direct multi-horizon forecasts, and
//! resumable per-(model, window) persistence.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_lag_features, RvPanel, HAR_LAGS};
use crate::error::{Error, Result};
use crate::eval::{mad, write_csv};
use crate::graph::{glasso_graph, Adjacency, GlassoCvConfig};
use crate::model::{GraphOperators, ModelKind, ModelParams, ParamSnapshot};
use crate::train::{
    budgeted_ensemble_fit, grid_search_hidden_dim, ols_fit, Dataset, Ensemble, EstimationCriterion, LossKind,
    ModelSpec, Split, TrainConfig,
};

/// Supported forecast horizons: next day, one week, one month (cumulative targets).
pub const HORIZONS: [usize; 3] = [0, 4, 21];

pub fn horizon_label(h: usize) -> String {
    match h {
        0 => "1d".into(),
        4 => "1w".into(),
        21 => "1m".into(),
        _ => format!("h{h}"),
    }
}

/// A model kind paired with its estimation criterion, e.g. `GNNHAR1L_Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelEntry {
    pub kind: ModelKind,
    pub criterion: EstimationCriterion,
}

impl ModelEntry {
    pub fn new(kind: ModelKind, criterion: EstimationCriterion) -> Self {
        Self { kind, criterion }
    }

    pub fn id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ModelEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.kind, self.criterion.tag())
    }
}

impl FromStr for ModelEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, ec) = s
            .rsplit_once('_')
            .ok_or_else(|| Error::InvalidInput(format!("model id `{s}` lacks a `_M`/`_Q` suffix")))?;
        Ok(Self {
            kind: kind.parse()?,
            criterion: ec.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    /// Re-estimate per window from that window's returns.
    Glasso(GlassoCvConfig),
    Fixed(Adjacency),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestSpec {
    /// Nominal window length in trading days; when set, every window must be within ±5% of it.
    pub window_days: Option<usize>,
    pub train_months: usize,
    pub validation_months: usize,
    pub refit_months: usize,
    pub horizons: Vec<usize>,
    pub models: Vec<ModelEntry>,
    pub train: TrainConfig,
    pub graph: GraphSource,
    /// Stop after this many windows (`None` runs the whole sample).
    pub max_windows: Option<usize>,
}

impl Default for BacktestSpec {
    fn default() -> Self {
        let m = |kind, ec| ModelEntry::new(kind, ec);
        let (mse, ql) = (EstimationCriterion::mse(), EstimationCriterion::qlike());
        Self {
            window_days: Some(1000),
            train_months: 36,
            validation_months: 12,
            refit_months: 1,
            horizons: HORIZONS.to_vec(),
            models: vec![
                m(ModelKind::Har, mse),
                m(ModelKind::Ghar, mse),
                m(ModelKind::Har, ql),
                m(ModelKind::Ghar, ql),
                m(ModelKind::Gnnhar { layers: 1 }, ql),
            ],
            train: TrainConfig::default(),
            graph: GraphSource::Glasso(GlassoCvConfig::default()),
            max_windows: None,
        }
    }
}

impl BacktestSpec {
    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.train_months == 0 {
            out.push("train_months must be at least 1".into());
        }
        if self.validation_months == 0 {
            out.push("validation_months must be at least 1".into());
        }
        if self.refit_months == 0 {
            out.push("refit_months must be at least 1".into());
        }
        if self.horizons.is_empty() {
            out.push("horizons must not be empty".into());
        }
        for h in &self.horizons {
            if !HORIZONS.contains(h) {
                out.push(format!("horizon {h} is not one of {HORIZONS:?}"));
            }
        }
        if self.models.is_empty() {
            out.push("models must not be empty".into());
        }
        let mut ids: Vec<String> = self.models.iter().map(ModelEntry::id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.models.len() {
            out.push("models must be distinct".into());
        }
        if self.max_windows == Some(0) {
            out.push("max_windows must be at least 1".into());
        }
        out.extend(self.train.violations());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub index: usize,
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
    /// `YYYY-MM` of the first test month.
    pub test_month: String,
}

fn month_blocks(dates: &[NaiveDate]) -> Vec<(String, Range<usize>)> {
    let mut out: Vec<(String, Range<usize>)> = Vec::new();
    for (k, d) in dates.iter().enumerate() {
        let label = format!("{:04}-{:02}", d.year(), d.month());
        match out.last_mut() {
            Some((l, r)) if *l == label => r.end = k + 1,
            _ => out.push((label, k..k + 1)),
        }
    }
    out
}

/// Monthly rolling windows: each test block of `refit_months` months is
/// preceded by `validation_months` of validation and, before that,
/// `train_months` of training data.
pub fn make_windows(dates: &[NaiveDate], spec: &BacktestSpec) -> Result<Vec<Window>> {
    if spec.train_months == 0 || spec.validation_months == 0 || spec.refit_months == 0 {
        return Err(Error::InvalidInput("window month counts must be positive".into()));
    }
    if dates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("dates must be strictly increasing".into()));
    }
    let months = month_blocks(dates);
    let span = spec.train_months + spec.validation_months;
    if months.len() <= span {
        let required = months.iter().take(span).map(|m| m.1.len()).sum::<usize>() + 1;
        return Err(Error::InsufficientWindow {
            required: required.max(HAR_LAGS + 1),
            available: dates.len(),
        });
    }
    let mut out = Vec::new();
    let mut k = span;
    while k < months.len() {
        let start = months[k - span].1.start;
        let val_start = months[k - spec.validation_months].1.start;
        let test_start = months[k].1.start;
        let last = (k + spec.refit_months).min(months.len()) - 1;
        let w = Window {
            index: out.len(),
            train: start..val_start,
            validation: val_start..test_start,
            test: test_start..months[last].1.end,
            test_month: months[k].0.clone(),
        };
        if w.train.end <= HAR_LAGS {
            return Err(Error::InsufficientWindow {
                required: test_start - w.train.end + HAR_LAGS + 1,
                available: test_start,
            });
        }
        if let Some(d) = spec.window_days {
            let len = test_start - start;
            if (len as f64 - d as f64).abs() > 0.05 * d as f64 {
                return Err(Error::InvalidInput(format!(
                    "window for {} spans {len} days, more than 5% away from window_days {d}",
                    w.test_month
                )));
            }
        }
        out.push(w);
        if spec.max_windows.is_some_and(|m| out.len() >= m) {
            break;
        }
        k += spec.refit_months;
    }
    Ok(out)
}

/// Out-of-sample forecasts of one model at one horizon; rows follow `origins`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    pub model: ModelEntry,
    pub horizon: usize,
    pub origins: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub values: DMatrix<f64>,
}

impl ForecastSet {
    pub fn model_id(&self) -> String {
        self.model.id()
    }
}

/// Fitted parameters of one model at one horizon in one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFit {
    pub window: usize,
    pub test_month: String,
    pub model: String,
    pub horizon: usize,
    /// One entry for OLS fits, one per ensemble member otherwise.
    pub members: Vec<ModelParams>,
    pub hidden_dim: Option<usize>,
    /// All-zero regressors fixed at zero by OLS.
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub window: Window,
    /// GLASSO penalty, `None` for a fixed graph.
    pub penalty: Option<f64>,
    pub adjacency: Adjacency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MadRecord {
    pub window: usize,
    pub model: String,
    pub layers: usize,
    pub mad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestOutput {
    pub windows: Vec<WindowRecord>,
    pub forecasts: Vec<ForecastSet>,
    pub fits: Vec<WindowFit>,
    pub mad: Vec<MadRecord>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    window: Window,
    penalty: Option<f64>,
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct HorizonFile {
    horizon: usize,
    members: Vec<ParamSnapshot>,
    hidden_dim: Option<usize>,
    dropped: Vec<String>,
    /// Forecast rows for the window's test origins.
    forecasts: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    model: String,
    horizons: Vec<HorizonFile>,
    mad: Option<(usize, f64)>,
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Parse {
        line: e.line(),
        field: path.display().to_string(),
        message: e.to_string(),
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("backtest records serialize")
}

/// Stable fingerprint of the backtest settings and input data; a store made from a
/// different fingerprint is refused instead of silently resumed.
fn fingerprint(panel: &RvPanel, returns: Option<&DMatrix<f64>>, spec: &BacktestSpec) -> String {
    let mut h = DefaultHasher::new();
    for d in panel.dates() {
        d.hash(&mut h);
    }
    panel.assets().hash(&mut h);
    for x in panel.values().iter().chain(returns.into_iter().flat_map(|r| r.iter())) {
        x.to_bits().hash(&mut h);
    }
    format!("{spec:?}\ndata {:016x}\n", h.finish())
}

fn window_error(w: &Window, e: Error) -> Error {
    e.with_context(format!("window {} ({})", w.index, w.test_month))
}

struct Ctx<'a> {
    panel: &'a RvPanel,
    returns: Option<&'a DMatrix<f64>>,
    spec: &'a BacktestSpec,
    store: Option<PathBuf>,
}

fn estimate_graph(ctx: &Ctx<'_>, w: &Window) -> Result<(Adjacency, Option<f64>)> {
    match &ctx.spec.graph {
        GraphSource::Fixed(a) => {
            if a.n() != ctx.panel.n_assets() {
                return Err(Error::Shape(format!(
                    "{}-node graph for {} assets",
                    a.n(),
                    ctx.panel.n_assets()
                )));
            }
            Ok((a.clone(), None))
        }
        GraphSource::Glasso(cfg) => {
            let r = ctx
                .returns
                .ok_or_else(|| Error::InvalidInput("GLASSO graphs need a returns panel".into()))?;
            let rows = r.rows(w.train.start, w.test.start - w.train.start).into_owned();
            let sel = glasso_graph(&rows, cfg)?;
            Ok((sel.adjacency, Some(sel.penalty)))
        }
    }
}

fn fit_model(ctx: &Ctx<'_>, w: &Window, entry: &ModelEntry, ops: &GraphOperators, a: &Adjacency) -> Result<ModelFile> {
    let panel = ctx.panel;
    let cfg = &ctx.spec.train;
    let mut horizons = Vec::new();
    let mut mad_value = None;
    let test_features: Vec<DMatrix<f64>> = w
        .test
        .clone()
        .map(|t| build_lag_features(panel, t).map(|f| f.matrix))
        .collect::<Result<_>>()?;
    for (hi, &h) in ctx.spec.horizons.iter().enumerate() {
        let first = w.train.start.max(HAR_LAGS);
        let train_end = w.train.end.saturating_sub(h);
        let val_end = w.validation.end - h;
        if train_end <= first || val_end <= w.validation.start {
            return Err(Error::InsufficientWindow {
                required: HAR_LAGS + h + 2,
                available: w.validation.end - w.train.start,
            });
        }
        let data = Dataset::from_panel(panel, h, first..val_end, ops.clone())?;
        let split = Split {
            train: 0..train_end - first,
            validation: w.validation.start - first..val_end - first,
        };
        let (members, hidden_dim, dropped, ensemble) = match (entry.kind.is_linear(), entry.criterion.kind) {
            (true, LossKind::Mse) => {
                let fit = ols_fit(entry.kind, &data, 0..data.len())?;
                let p = ModelParams::Linear(fit.params);
                (vec![p], None, fit.dropped, None)
            }
            (true, LossKind::Qlike) => {
                // linear initialization is deterministic, so one member suffices
                let single = TrainConfig {
                    ensemble_size: 1,
                    ..cfg.clone()
                };
                let (ens, _) =
                    budgeted_ensemble_fit(&ModelSpec::new(entry.kind), &data, &split, &entry.criterion, &single)?;
                (
                    ens.members.iter().map(|m| m.params.clone()).collect(),
                    None,
                    Vec::new(),
                    Some(ens),
                )
            }
            (false, _) => {
                let g = grid_search_hidden_dim(&ModelSpec::new(entry.kind), &data, &split, &entry.criterion, cfg)?;
                (
                    g.best.members.iter().map(|m| m.params.clone()).collect(),
                    Some(g.best_dim),
                    Vec::new(),
                    Some(g.best),
                )
            }
        };
        let ens = ensemble.unwrap_or_else(|| Ensemble { members: Vec::new() });
        let forecasts = test_features
            .iter()
            .map(|v| predict_members(&members, v, ops).map(|f| f.iter().copied().collect()))
            .collect::<Result<_>>()?;
        if hi == 0 {
            if let ModelKind::Gnnhar { layers } = entry.kind {
                if let Some(hidden) = ens.hidden(&test_features[0], ops)? {
                    mad_value = Some((layers, mad(&hidden, a)?.value));
                }
            }
        }
        horizons.push(HorizonFile {
            horizon: h,
            members: members.iter().map(ModelParams::to_snapshot).collect::<Result<_>>()?,
            hidden_dim,
            dropped,
            forecasts,
        });
    }
    Ok(ModelFile {
        model: entry.id(),
        horizons,
        mad: mad_value,
    })
}

/// Member-average forecast, summed in member order.
pub fn predict_members(
    members: &[ModelParams],
    v: &DMatrix<f64>,
    ops: &GraphOperators,
) -> Result<nalgebra::DVector<f64>> {
    let mut sum = nalgebra::DVector::zeros(v.nrows());
    for m in members {
        sum += m.predict(v, ops)?;
    }
    Ok(sum / members.len() as f64)
}

fn run_window(ctx: &Ctx<'_>, w: &Window) -> Result<(GraphFile, Vec<ModelFile>)> {
    let dir = ctx
        .store
        .as_ref()
        .map(|s| s.join("windows").join(format!("{:04}", w.index)));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let graph_path = dir.as_ref().map(|d| d.join("graph.json"));
    let graph = match graph_path.as_deref().map(read_json::<GraphFile>).transpose()?.flatten() {
        Some(g) => g,
        None => {
            let (a, penalty) = estimate_graph(ctx, w)?;
            let g = GraphFile {
                window: w.clone(),
                penalty,
                edges: a.edges(),
            };
            if let Some(p) = &graph_path {
                write_atomic(p, &to_json(&g))?;
            }
            g
        }
    };
    let a = Adjacency::from_edges(ctx.panel.n_assets(), &graph.edges)?;
    let ops = GraphOperators::new(&a);
    let mut models = Vec::new();
    for entry in &ctx.spec.models {
        let path = dir.as_ref().map(|d| d.join(format!("{}.json", entry.id())));
        let file = match path.as_deref().map(read_json::<ModelFile>).transpose()?.flatten() {
            Some(f) => f,
            None => {
                let f =
                    fit_model(ctx, w, entry, &ops, &a).map_err(|e| e.with_context(format!("model {}", entry.id())))?;
                if let Some(p) = &path {
                    write_atomic(p, &to_json(&f))?;
                }
                f
            }
        };
        models.push(file);
    }
    Ok((graph, models))
}

/// Runs every window (in parallel) and assembles forecasts in window order.
/// With `store`, each window's graph and each (model, window) result is
/// written as it completes and reused on rerun.
pub fn run_backtest(
    panel: &RvPanel,
    returns: Option<&DMatrix<f64>>,
    spec: &BacktestSpec,
    store: Option<&Path>,
) -> Result<BacktestOutput> {
    let v = spec.violations();
    if !v.is_empty() {
        return Err(Error::InvalidInput(v.join("; ")));
    }
    if let Some(r) = returns {
        if r.shape() != panel.values().shape() {
            return Err(Error::Shape(format!(
                "returns are {:?}, panel is {:?}",
                r.shape(),
                panel.values().shape()
            )));
        }
    }
    let windows = make_windows(panel.dates(), spec)?;
    if let Some(s) = store {
        std::fs::create_dir_all(s).map_err(|e| Error::io(s, e))?;
        let fp_path = s.join("fingerprint.txt");
        let fp = fingerprint(panel, returns, spec);
        if fp_path.exists() {
            let old = std::fs::read_to_string(&fp_path).map_err(|e| Error::io(&fp_path, e))?;
            if old != fp {
                return Err(Error::InvalidInput(format!(
                    "store {} was produced by a different spec or data; use a fresh directory",
                    s.display()
                )));
            }
        } else {
            write_atomic(&fp_path, &fp)?;
        }
    }
    let ctx = Ctx {
        panel,
        returns,
        spec,
        store: store.map(Path::to_path_buf),
    };
    let results: Vec<(GraphFile, Vec<ModelFile>)> = windows
        .par_iter()
        .map(|w| run_window(&ctx, w).map_err(|e| window_error(w, e)))
        .collect::<Result<_>>()?;
    assemble(panel, spec, results)
}

fn assemble(panel: &RvPanel, spec: &BacktestSpec, results: Vec<(GraphFile, Vec<ModelFile>)>) -> Result<BacktestOutput> {
    let n = panel.n_assets();
    let mut records = Vec::new();
    let mut fits = Vec::new();
    let mut mads = Vec::new();
    let mut rows: BTreeMap<(usize, usize), (Vec<NaiveDate>, Vec<f64>)> = BTreeMap::new();
    for (graph, models) in results {
        let w = &graph.window;
        records.push(WindowRecord {
            window: w.clone(),
            penalty: graph.penalty,
            adjacency: Adjacency::from_edges(n, &graph.edges)?,
        });
        for (mi, file) in models.into_iter().enumerate() {
            if let Some((layers, value)) = file.mad {
                mads.push(MadRecord {
                    window: w.index,
                    model: file.model.clone(),
                    layers,
                    mad: value,
                });
            }
            for (hi, hf) in file.horizons.into_iter().enumerate() {
                if hf.forecasts.len() != w.test.len() || hf.forecasts.iter().any(|r| r.len() != n) {
                    return Err(Error::Shape(format!(
                        "stored forecasts for {} window {} are incomplete",
                        file.model, w.index
                    )));
                }
                let entry = rows.entry((mi, hi)).or_default();
                entry.0.extend_from_slice(&panel.dates()[w.test.clone()]);
                entry.1.extend(hf.forecasts.iter().flatten());
                fits.push(WindowFit {
                    window: w.index,
                    test_month: w.test_month.clone(),
                    model: file.model.clone(),
                    horizon: hf.horizon,
                    members: hf
                        .members
                        .iter()
                        .map(ModelParams::from_snapshot)
                        .collect::<Result<_>>()?,
                    hidden_dim: hf.hidden_dim,
                    dropped: hf.dropped,
                });
            }
        }
    }
    let forecasts = rows
        .into_iter()
        .map(|((mi, hi), (origins, flat))| ForecastSet {
            model: spec.models[mi],
            horizon: spec.horizons[hi],
            values: DMatrix::from_row_slice(origins.len(), n, &flat),
            origins,
            assets: panel.assets().to_vec(),
        })
        .collect();
    Ok(BacktestOutput {
        windows: records,
        forecasts,
        fits,
        mad: mads,
    })
}

/// Long format: `origin_date,asset,horizon,model,criterion,forecast`.
pub fn write_forecasts(path: impl AsRef<Path>, sets: &[ForecastSet]) -> Result<()> {
    let mut rows = Vec::new();
    for s in sets {
        for (r, d) in s.origins.iter().enumerate() {
            for (j, a) in s.assets.iter().enumerate() {
                rows.push(vec![
                    d.to_string(),
                    a.clone(),
                    s.horizon.to_string(),
                    s.model.kind.to_string(),
                    s.model.criterion.tag().to_string(),
                    s.values[(r, j)].to_string(),
                ]);
            }
        }
    }
    write_csv(
        path,
        &["origin_date", "asset", "horizon", "model", "criterion", "forecast"],
        rows,
    )
}

pub fn read_forecasts(path: impl AsRef<Path>) -> Result<Vec<ForecastSet>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            field: "header".into(),
            message: e.to_string(),
        })?
        .iter()
        .map(String::from)
        .collect();
    if header != ["origin_date", "asset", "horizon", "model", "criterion", "forecast"] {
        return Err(Error::Parse {
            line: 1,
            field: "header".into(),
            message: "expected origin_date,asset,horizon,model,criterion,forecast".into(),
        });
    }
    type Key = (String, usize);
    let mut order: Vec<Key> = Vec::new();
    type Cells = (Vec<NaiveDate>, Vec<String>, BTreeMap<(NaiveDate, String), f64>);
    let mut cells: BTreeMap<Key, Cells> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let perr = |field: &str, message: String| Error::Parse {
            line,
            field: field.into(),
            message,
        };
        let rec = rec.map_err(|e| perr("record", e.to_string()))?;
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| perr("origin_date", e.to_string()))?;
        let h: usize = rec[2]
            .parse()
            .map_err(|e: std::num::ParseIntError| perr("horizon", e.to_string()))?;
        let id = format!("{}_{}", &rec[3], &rec[4]);
        id.parse::<ModelEntry>().map_err(|e| perr("model", e.to_string()))?;
        let v: f64 = rec[5]
            .parse()
            .map_err(|e: std::num::ParseFloatError| perr("forecast", e.to_string()))?;
        let key = (id, h);
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        let entry = cells.entry(key).or_default();
        if entry.0.last() != Some(&date) {
            entry.0.push(date);
        }
        if !entry.1.contains(&rec[1].to_string()) {
            entry.1.push(rec[1].to_string());
        }
        if entry.2.insert((date, rec[1].to_string()), v).is_some() {
            return Err(perr("asset", format!("duplicate forecast for {date} {}", &rec[1])));
        }
    }
    let mut out = Vec::new();
    for key in order {
        let (origins, assets, map) = cells.remove(&key).expect("key recorded");
        let mut values = DMatrix::zeros(origins.len(), assets.len());
        for (r, d) in origins.iter().enumerate() {
            for (j, a) in assets.iter().enumerate() {
                values[(r, j)] = *map.get(&(*d, a.clone())).ok_or_else(|| Error::PanelHole {
                    missing: origins.len() * assets.len() - map.len(),
                    first: format!("{} {d} {a}", key.0),
                })?;
            }
        }
        out.push(ForecastSet {
            model: key.0.parse()?,
            horizon: key.1,
            origins,
            assets,
            values,
        });
    }
    Ok(out)
}

/// `window,test_month,train_start,validation_start,test_start,test_end,penalty,edges`.
pub fn write_window_summary(path: impl AsRef<Path>, panel: &RvPanel, windows: &[WindowRecord]) -> Result<()> {
    let d = panel.dates();
    let rows = windows
        .iter()
        .map(|r| {
            let w = &r.window;
            vec![
                w.index.to_string(),
                w.test_month.clone(),
                d[w.train.start].to_string(),
                d[w.validation.start].to_string(),
                d[w.test.start].to_string(),
                d[w.test.end - 1].to_string(),
                r.penalty.map(|p| p.to_string()).unwrap_or_default(),
                r.adjacency.n_edges().to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        &[
            "window",
            "test_month",
            "train_start",
            "validation_start",
            "test_start",
            "test_end",
            "penalty",
            "edges",
        ],
        rows,
    )
}

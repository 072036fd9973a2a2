//! Subcommand implementations. Each writes into its own output directory and
//! finishes with `manifest.json`, which holds settings and sha256 digests keyed
//! by role. It never records paths or timestamps, so identical inputs give
//! identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use volgraph::backtest::{
    read_forecasts, run_backtest, write_forecasts, write_window_summary, GraphSource, MadRecord, WindowFit,
};
use volgraph::data::{
    compute_daily_rv, generate_synthetic_panel, load_index_rv, load_intraday, load_returns, load_rv_panel,
    write_index_rv, write_returns, write_rv_panel, IndexRv, RvPanel, SyntheticSpec,
};
use volgraph::eval::{stratify_by_regime, write_report_bundle, McsConfig, ReportInputs};
use volgraph::graph::{glasso_graph, read_edge_list, spd_frequency, write_edge_list, write_spd_report, Adjacency};
use volgraph::model::{GnnParams, LinearParams, ModelKind, ModelParams, ParamSnapshot};
use volgraph::{Error, ErrorClass};

use crate::config::{check_path, parse_space, require_seed, RunConfig};

/// A failure carrying its exit-code class.
#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

impl CliError {
    pub fn config(violations: Vec<String>) -> Self {
        Self {
            class: ErrorClass::Config,
            message: violations.join("; "),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            class: e.class(),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    Error::io(path, e).into()
}

fn ok_or_config(v: Vec<String>) -> CliResult<()> {
    if v.is_empty() {
        Ok(())
    } else {
        Err(CliError::config(v))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn digest(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct Manifest<'a, S: Serialize> {
    command: &'a str,
    seed: Option<u64>,
    settings: &'a S,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

/// Writes `manifest.json` with digests of `inputs` (role -> file) and of the named outputs in `dir`.
fn write_manifest<S: Serialize>(
    dir: &Path,
    command: &str,
    seed: Option<u64>,
    settings: &S,
    inputs: &[(&str, &Path)],
    outputs: &[String],
) -> CliResult<()> {
    let mut m = Manifest {
        command,
        seed,
        settings,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    for (role, p) in inputs {
        m.inputs.insert(role.to_string(), digest(p)?);
    }
    for name in outputs {
        m.outputs.insert(name.clone(), digest(&dir.join(name))?);
    }
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    let path = dir.join("manifest.json");
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

fn out_dir(cfg: &RunConfig, sub: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("out")).join(sub)
}

/// Directory layout under `out`: `data/` (synth), `rv/`, `graph/`, `backtest/`, `report/`.
pub fn default_input(cfg: &RunConfig, sub: &str, file: &str) -> PathBuf {
    out_dir(cfg, sub).join(file)
}

pub fn compute_rv(cfg: &RunConfig, delta: u32, base: u32) -> CliResult<()> {
    let mut v = Vec::new();
    let intraday = cfg.data.intraday.clone();
    if intraday.is_none() {
        v.push("data.intraday: required (set it or pass --intraday)".into());
    }
    check_path(&mut v, "data.intraday", intraday.as_ref());
    if delta == 0 || base == 0 {
        v.push(format!("delta and base must be positive, got {delta} and {base}"));
    }
    ok_or_config(v)?;
    let intraday = intraday.expect("checked above");

    let series = load_intraday(&intraday)?;
    let mut cells: BTreeMap<(NaiveDate, String), f64> = BTreeMap::new();
    for s in &series {
        cells.insert((s.day, s.asset.clone()), compute_daily_rv(s, delta, base)?);
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
    let mut values = DMatrix::from_element(dates.len(), assets.len(), f64::NAN);
    for (r, d) in dates.iter().enumerate() {
        for (c, a) in assets.iter().enumerate() {
            values[(r, c)] = cells.get(&(*d, a.clone())).copied().ok_or_else(|| Error::PanelHole {
                missing: dates.len() * assets.len() - cells.len(),
                first: format!("{d} {a}"),
            })?;
        }
    }
    let panel = RvPanel::new(dates, assets, values)?;

    let dir = out_dir(cfg, "rv");
    create_dir(&dir)?;
    write_rv_panel(dir.join("rv.csv"), &panel)?;
    #[derive(Serialize)]
    struct Settings {
        delta_minutes: u32,
        base_minutes: u32,
    }
    write_manifest(
        &dir,
        "compute-rv",
        None,
        &Settings {
            delta_minutes: delta,
            base_minutes: base,
        },
        &[("intraday", &intraday)],
        &["rv.csv".into()],
    )
}

pub fn estimate_graph(cfg: &RunConfig) -> CliResult<()> {
    let mut v = Vec::new();
    let returns = cfg
        .data
        .returns
        .clone()
        .unwrap_or_else(|| default_input(cfg, "data", "returns.csv"));
    check_path(&mut v, "data.returns", Some(&returns));
    let glasso = cfg.glasso.resolve(&mut v);
    ok_or_config(v)?;

    let (_, assets, r) = load_returns(&returns)?;
    let sel = glasso_graph(&r, &glasso)?;
    let dir = out_dir(cfg, "graph");
    create_dir(&dir)?;
    write_edge_list(dir.join("edges.csv"), &sel.adjacency, &assets)?;
    write_spd_report(dir.join("spd.csv"), &spd_frequency(&sel.adjacency))?;
    let mut w = csv_writer(&dir.join("cv.csv"))?;
    write_row(&mut w, &dir, &["penalty", "mean_loglik", "std_error", "selected"])?;
    for p in &sel.cv_scores {
        let row = [
            p.penalty.to_string(),
            p.mean.to_string(),
            p.std_error.to_string(),
            (p.penalty == sel.penalty).to_string(),
        ];
        write_row(&mut w, &dir, &row)?;
    }
    flush(w, &dir)?;
    write_manifest(
        &dir,
        "estimate-graph",
        None,
        &cfg.glasso,
        &[("returns", &returns)],
        &["edges.csv".into(), "spd.csv".into(), "cv.csv".into()],
    )
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| io_err(path, std::io::Error::other(e)))
}

fn write_row<I: AsRef<[u8]>>(w: &mut csv::Writer<fs::File>, dir: &Path, row: &[I]) -> CliResult<()> {
    w.write_record(row).map_err(|e| io_err(dir, std::io::Error::other(e)))
}

fn flush(mut w: csv::Writer<fs::File>, dir: &Path) -> CliResult<()> {
    w.flush().map_err(|e| io_err(dir, e))
}

/// Serialized form of one window fit.
#[derive(Serialize, Deserialize)]
struct FitDoc {
    window: usize,
    test_month: String,
    model: String,
    horizon: usize,
    members: Vec<ParamSnapshot>,
    hidden_dim: Option<usize>,
    dropped: Vec<String>,
}

fn fits_to_json(fits: &[WindowFit]) -> CliResult<String> {
    let docs = fits
        .iter()
        .map(|f| {
            Ok(FitDoc {
                window: f.window,
                test_month: f.test_month.clone(),
                model: f.model.clone(),
                horizon: f.horizon,
                members: f
                    .members
                    .iter()
                    .map(|m| m.to_snapshot())
                    .collect::<volgraph::Result<_>>()?,
                hidden_dim: f.hidden_dim,
                dropped: f.dropped.clone(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(serde_json::to_string(&docs).expect("fits serialize") + "\n")
}

fn fits_from_json(path: &Path) -> CliResult<Vec<WindowFit>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let docs: Vec<FitDoc> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        field: "fits".into(),
        message: e.to_string(),
    })?;
    docs.into_iter()
        .map(|d| {
            Ok(WindowFit {
                window: d.window,
                test_month: d.test_month,
                model: d.model,
                horizon: d.horizon,
                members: d
                    .members
                    .iter()
                    .map(ModelParams::from_snapshot)
                    .collect::<volgraph::Result<_>>()?,
                hidden_dim: d.hidden_dim,
                dropped: d.dropped,
            })
        })
        .collect()
}

fn write_mad(path: &Path, rows: &[MadRecord]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    write_row(&mut w, path, &["window", "model", "layers", "mad"])?;
    for r in rows {
        write_row(
            &mut w,
            path,
            &[
                r.window.to_string(),
                r.model.clone(),
                r.layers.to_string(),
                r.mad.to_string(),
            ],
        )?;
    }
    flush(w, path)
}

fn read_mad(path: &Path) -> CliResult<Vec<(usize, String, usize, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for (k, rec) in rdr.deserialize::<(usize, String, usize, f64)>().enumerate() {
        out.push(rec.map_err(|e| Error::Parse {
            line: k + 2,
            field: "mad".into(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct BacktestSettings<'a> {
    window_days: Option<usize>,
    train_months: usize,
    validation_months: usize,
    refit_months: usize,
    horizons: &'a [usize],
    models: Vec<String>,
    max_windows: Option<usize>,
    train: &'a crate::config::TrainSection,
    glasso: Option<&'a crate::config::GlassoSection>,
}

pub fn backtest(cfg: &RunConfig) -> CliResult<()> {
    let mut v = Vec::new();
    let seed = require_seed(&mut v, cfg.seed);
    let rv = cfg
        .data
        .rv
        .clone()
        .unwrap_or_else(|| default_input(cfg, "data", "rv.csv"));
    check_path(&mut v, "data.rv", Some(&rv));
    check_path(&mut v, "data.graph", cfg.data.graph.as_ref());
    let returns = match &cfg.data.graph {
        Some(_) => None,
        None => {
            let r = cfg
                .data
                .returns
                .clone()
                .unwrap_or_else(|| default_input(cfg, "data", "returns.csv"));
            check_path(&mut v, "data.returns", Some(&r));
            Some(r)
        }
    };
    let glasso = cfg.glasso.resolve(&mut v);
    let train = cfg.train.resolve(seed);
    let source = match &cfg.data.graph {
        Some(_) => GraphSource::Fixed(Adjacency::empty(0)),
        None => GraphSource::Glasso(glasso),
    };
    let mut spec = cfg.backtest.resolve(train, source, &mut v);
    ok_or_config(v)?;

    let panel = load_rv_panel(&rv)?;
    if let Some(g) = &cfg.data.graph {
        spec.graph = GraphSource::Fixed(read_edge_list(g, panel.assets())?);
    }
    let ret = match &returns {
        Some(p) => {
            let (dates, assets, r) = load_returns(p)?;
            if dates != panel.dates() || assets != panel.assets() {
                return Err(Error::Shape("returns and RV panel have different dates or assets".into()).into());
            }
            Some(r)
        }
        None => None,
    };

    let dir = out_dir(cfg, "backtest");
    create_dir(&dir)?;
    let out = run_backtest(&panel, ret.as_ref(), &spec, Some(&dir.join("store")))?;
    write_forecasts(dir.join("forecasts.csv"), &out.forecasts)?;
    write_window_summary(dir.join("windows.csv"), &panel, &out.windows)?;
    let fits = dir.join("fits.json");
    fs::write(&fits, fits_to_json(&out.fits)?).map_err(|e| io_err(&fits, e))?;
    write_mad(&dir.join("mad.csv"), &out.mad)?;

    let settings = BacktestSettings {
        window_days: spec.window_days,
        train_months: spec.train_months,
        validation_months: spec.validation_months,
        refit_months: spec.refit_months,
        horizons: &spec.horizons,
        models: spec.models.iter().map(|m| m.id()).collect(),
        max_windows: spec.max_windows,
        train: &cfg.train,
        glasso: returns.as_ref().map(|_| &cfg.glasso),
    };
    let mut inputs: Vec<(&str, &Path)> = vec![("rv", &rv)];
    if let Some(r) = &returns {
        inputs.push(("returns", r));
    }
    if let Some(g) = &cfg.data.graph {
        inputs.push(("graph", g));
    }
    let outputs = ["forecasts.csv", "windows.csv", "fits.json", "mad.csv"].map(String::from);
    write_manifest(&dir, "backtest", Some(seed), &settings, &inputs, &outputs)
}

#[derive(Serialize)]
struct EvaluateSettings<'a> {
    baseline: &'a str,
    regime_quantile: Option<f64>,
    mcs_alpha: f64,
    mcs_bootstrap_reps: usize,
    mcs_block_length: usize,
}

pub fn evaluate(cfg: &RunConfig) -> CliResult<()> {
    let mut v = Vec::new();
    let seed = require_seed(&mut v, cfg.seed);
    let fdir = cfg.data.forecasts.clone().unwrap_or_else(|| out_dir(cfg, "backtest"));
    let forecasts = fdir.join("forecasts.csv");
    check_path(&mut v, "data.forecasts", Some(&forecasts));
    let rv = cfg
        .data
        .rv
        .clone()
        .unwrap_or_else(|| default_input(cfg, "data", "rv.csv"));
    check_path(&mut v, "data.rv", Some(&rv));
    let index_rv = match &cfg.data.index_rv {
        Some(p) => Some(p.clone()),
        None => Some(default_input(cfg, "data", "index_rv.csv")).filter(|p| p.exists()),
    };
    check_path(&mut v, "data.index_rv", index_rv.as_ref());
    let q = cfg.evaluate.regime_quantile(&mut v);
    let d = McsConfig::default();
    let mcs = McsConfig {
        alpha: cfg.evaluate.mcs_alpha.unwrap_or(d.alpha),
        bootstrap_reps: cfg.evaluate.mcs_bootstrap_reps.unwrap_or(d.bootstrap_reps),
        block_length: cfg.evaluate.mcs_block_length.unwrap_or(d.block_length),
        seed,
    };
    if !(mcs.alpha > 0.0 && mcs.alpha < 1.0) {
        v.push(format!("evaluate.mcs_alpha: must lie in (0, 1), got {}", mcs.alpha));
    }
    if mcs.bootstrap_reps == 0 || mcs.block_length == 0 {
        v.push("evaluate.mcs_bootstrap_reps and evaluate.mcs_block_length must be positive".into());
    }
    let baseline = cfg.evaluate.baseline.clone().unwrap_or_else(|| "HAR_M".into());
    ok_or_config(v)?;

    let panel = load_rv_panel(&rv)?;
    let sets = read_forecasts(&forecasts)?;
    if !sets.iter().any(|s| s.model_id() == baseline) {
        return Err(CliError::config(vec![format!(
            "evaluate.baseline: {baseline} has no forecasts in {}",
            forecasts.display()
        )]));
    }
    let fits_path = fdir.join("fits.json");
    let fits = if fits_path.exists() {
        fits_from_json(&fits_path)?
    } else {
        Vec::new()
    };
    let mad_path = fdir.join("mad.csv");
    let mad_rows = if mad_path.exists() {
        read_mad(&mad_path)?
    } else {
        Vec::new()
    };
    let regimes = match &index_rv {
        Some(p) => {
            let index = load_index_rv(p)?;
            let origins: BTreeSet<NaiveDate> = sets.iter().flat_map(|s| s.origins.iter().copied()).collect();
            let (dates, values): (Vec<NaiveDate>, Vec<f64>) =
                origins.iter().filter_map(|d| index.get(*d).map(|x| (*d, x))).unzip();
            if dates.is_empty() {
                return Err(Error::Shape("index RV covers none of the forecast origins".into()).into());
            }
            Some(stratify_by_regime(&dates, &values, q)?)
        }
        None => None,
    };

    let dir = out_dir(cfg, "report");
    let inputs = ReportInputs {
        forecasts: &sets,
        panel: &panel,
        baseline: &baseline,
        regimes: regimes.as_ref(),
        window_fits: &fits,
        mad_rows: &mad_rows,
        mcs: mcs.clone(),
    };
    let written = write_report_bundle(&dir, &inputs)?;
    let settings = EvaluateSettings {
        baseline: &baseline,
        regime_quantile: index_rv.as_ref().map(|_| q),
        mcs_alpha: mcs.alpha,
        mcs_bootstrap_reps: mcs.bootstrap_reps,
        mcs_block_length: mcs.block_length,
    };
    let mut ins: Vec<(&str, &Path)> = vec![("forecasts", &forecasts), ("rv", &rv)];
    if fits_path.exists() {
        ins.push(("fits", &fits_path));
    }
    if mad_path.exists() {
        ins.push(("mad", &mad_path));
    }
    if let Some(p) = &index_rv {
        ins.push(("index_rv", p));
    }
    write_manifest(&dir, "evaluate", Some(seed), &settings, &ins, &written)
}

fn synth_graph(kind: &str, n: usize, p: f64, extra: &[[usize; 2]], seed: u64) -> CliResult<Adjacency> {
    use rand::SeedableRng;
    let mut edges: Vec<(usize, usize)> = match kind {
        "ring" => (0..n).map(|i| (i, (i + 1) % n)).filter(|(i, j)| i != j).collect(),
        "path" => (1..n).map(|i| (i - 1, i)).collect(),
        "complete" => Adjacency::complete(n).edges(),
        "random" => Adjacency::random(n, p, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).edges(),
        _ => Vec::new(),
    };
    edges.extend(extra.iter().map(|[i, j]| (*i, *j)));
    edges.sort_unstable_by_key(|&(i, j)| (i.min(j), i.max(j)));
    edges.dedup_by_key(|&mut (i, j)| (i.min(j), i.max(j)));
    Ok(Adjacency::from_edges(n, &edges)?)
}

#[derive(Serialize)]
struct Truth {
    model: String,
    edges: Vec<[String; 2]>,
    coefficients: ParamSnapshot,
}

pub fn synth(cfg: &RunConfig) -> CliResult<()> {
    let mut v = Vec::new();
    let seed = require_seed(&mut v, cfg.seed);
    let s = cfg.synth.resolve(&mut v);
    ok_or_config(v)?;

    let n = s.n_assets;
    let adjacency = synth_graph(&s.graph, n, s.edge_probability, &s.extra_edges, seed)?;
    let alpha = DVector::from_element(n, s.alpha);
    let coefficients = match s.model.parse::<ModelKind>()? {
        ModelKind::Gnnhar { .. } => ModelParams::Gnn(GnnParams {
            alpha,
            beta: s.beta,
            layers: s
                .layers
                .iter()
                .map(|rows| {
                    let cols = rows.first().map_or(0, Vec::len);
                    if rows.iter().any(|r| r.len() != cols) {
                        return Err(CliError::config(vec!["synth.layers: ragged layer matrix".into()]));
                    }
                    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
                })
                .collect::<CliResult<_>>()?,
            gamma: DVector::from_vec(s.gamma.clone()),
        }),
        kind => {
            let g = [s.gamma[0], s.gamma[1], s.gamma[2]];
            ModelParams::Linear(LinearParams {
                alpha,
                beta: s.beta,
                gamma: (kind != ModelKind::Har).then_some(g),
                delta: (kind == ModelKind::Ghar2Hop).then_some(s.delta),
            })
        }
    };
    if let ModelParams::Gnn(g) = &coefficients {
        g.check_shapes()
            .map_err(|e| CliError::config(vec![format!("synth.layers/gamma: {e}")]))?;
    }
    let mut spec = SyntheticSpec::new(adjacency.clone(), coefficients.clone(), s.noise, s.n_days, seed);
    spec.space = parse_space(&s.space).expect("validated");
    spec.burn_in = s.burn_in;
    spec.return_coupling = s.return_coupling;
    spec.start_date = NaiveDate::parse_from_str(&s.start_date, "%Y-%m-%d").expect("validated");
    let data = generate_synthetic_panel(&spec)?;

    let dir = out_dir(cfg, "data");
    create_dir(&dir)?;
    let panel = &data.panel;
    write_rv_panel(dir.join("rv.csv"), panel)?;
    write_returns(dir.join("returns.csv"), panel.dates(), panel.assets(), &data.returns)?;
    let index = IndexRv {
        dates: panel.dates().to_vec(),
        values: panel.values().row_iter().map(|r| r.mean()).collect(),
    };
    write_index_rv(dir.join("index_rv.csv"), &index)?;
    write_edge_list(dir.join("edges.csv"), &adjacency, panel.assets())?;
    let truth = Truth {
        model: s.model.clone(),
        edges: adjacency
            .edges()
            .into_iter()
            .map(|(i, j)| [panel.assets()[i].clone(), panel.assets()[j].clone()])
            .collect(),
        coefficients: coefficients.to_snapshot()?,
    };
    let tp = dir.join("truth.json");
    fs::write(
        &tp,
        serde_json::to_string_pretty(&truth).expect("truth serializes") + "\n",
    )
    .map_err(|e| io_err(&tp, e))?;
    let outputs = ["rv.csv", "returns.csv", "index_rv.csv", "edges.csv", "truth.json"].map(String::from);
    write_manifest(&dir, "synth", Some(seed), &s, &[], &outputs)
}

//! TOML run configuration. Precedence: command-line flag > config key > built-in default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use volgraph::backtest::{BacktestSpec, GraphSource, ModelEntry};
use volgraph::data::DgpSpace;
use volgraph::graph::{CvRule, GlassoCvConfig};
use volgraph::model::ModelKind;
use volgraph::train::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub backtest: BacktestSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub glasso: GlassoSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub rv: Option<PathBuf>,
    pub returns: Option<PathBuf>,
    pub index_rv: Option<PathBuf>,
    /// Fixed edge list; when absent the graph is estimated by GLASSO per window.
    pub graph: Option<PathBuf>,
    pub intraday: Option<PathBuf>,
    pub forecasts: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BacktestSection {
    /// 0 disables the window-length check.
    pub window_days: Option<usize>,
    pub train_months: Option<usize>,
    pub validation_months: Option<usize>,
    pub refit_months: Option<usize>,
    /// Zero-based: horizon `h` forecasts the RV `h + 1` days after the origin.
    pub horizons: Option<Vec<usize>>,
    pub models: Option<Vec<String>>,
    pub max_windows: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub batch_size_days: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience_epochs: Option<usize>,
    pub ensemble_size: Option<usize>,
    pub hidden_dim_grid: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GlassoSection {
    pub penalties: Option<Vec<f64>>,
    pub grid_size: Option<usize>,
    pub folds: Option<usize>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    /// `one-se` or `best-mean`.
    pub rule: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_assets: Option<usize>,
    pub n_days: Option<usize>,
    pub noise: Option<f64>,
    /// `level` or `log`.
    pub space: Option<String>,
    /// `HAR`, `GHAR`, `GHAR2Hop` or `GNNHAR{L}L`.
    pub model: Option<String>,
    /// `ring`, `path`, `complete`, `random` or `empty`.
    pub graph: Option<String>,
    pub edge_probability: Option<f64>,
    /// Edges added on top of `graph`, as zero-based asset index pairs.
    pub extra_edges: Option<Vec<[usize; 2]>>,
    /// Scalar intercept shared by all assets.
    pub alpha: Option<f64>,
    pub beta: Option<[f64; 3]>,
    /// Linear 1st-hop coefficients, or the GNN output weights.
    pub gamma: Option<Vec<f64>>,
    pub delta: Option<[f64; 3]>,
    /// GNN layer matrices, each given as rows.
    pub layers: Option<Vec<Vec<Vec<f64>>>>,
    pub burn_in: Option<usize>,
    pub return_coupling: Option<f64>,
    pub start_date: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub baseline: Option<String>,
    pub regime_quantile: Option<f64>,
    pub mcs_alpha: Option<f64>,
    pub mcs_bootstrap_reps: Option<usize>,
    pub mcs_block_length: Option<usize>,
}

pub fn load(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("config {}: {}", path.display(), e.message()))
}

/// Records a violation when `path` is set but missing.
pub fn check_path(v: &mut Vec<String>, key: &str, path: Option<&PathBuf>) {
    if let Some(p) = path {
        if !p.exists() {
            v.push(format!("{key}: file not found: {}", p.display()));
        }
    }
}

pub fn require_seed(v: &mut Vec<String>, seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        v.push("seed: mandatory (set `seed` or pass --seed)".into());
        0
    })
}

impl TrainSection {
    pub fn resolve(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size_days: self.batch_size_days.unwrap_or(d.batch_size_days),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            patience_epochs: self.patience_epochs.unwrap_or(d.patience_epochs),
            ensemble_size: self.ensemble_size.unwrap_or(d.ensemble_size),
            seed,
            hidden_dim_grid: self.hidden_dim_grid.clone().unwrap_or(d.hidden_dim_grid),
        }
    }
}

impl GlassoSection {
    pub fn resolve(&self, v: &mut Vec<String>) -> GlassoCvConfig {
        let d = GlassoCvConfig::default();
        let rule = match self.rule.as_deref() {
            None | Some("one-se") => CvRule::OneStandardError,
            Some("best-mean") => CvRule::BestMean,
            Some(other) => {
                v.push(format!("glasso.rule: expected `one-se` or `best-mean`, got `{other}`"));
                d.rule
            }
        };
        if let Some(p) = &self.penalties {
            if p.is_empty() || p.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                v.push("glasso.penalties: must be a nonempty list of positive numbers".into());
            }
        }
        let cfg = GlassoCvConfig {
            penalty_grid: self.penalties.clone(),
            grid_size: self.grid_size.unwrap_or(d.grid_size),
            folds: self.folds.unwrap_or(d.folds),
            tol: self.tol.unwrap_or(d.tol),
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            rule,
        };
        if cfg.folds < 2 {
            v.push(format!("glasso.folds: must be at least 2, got {}", cfg.folds));
        }
        if cfg.penalty_grid.is_none() && cfg.grid_size < 2 {
            v.push(format!("glasso.grid_size: must be at least 2, got {}", cfg.grid_size));
        }
        if !(cfg.tol > 0.0) {
            v.push(format!("glasso.tol: must be positive, got {}", cfg.tol));
        }
        if cfg.max_iter == 0 {
            v.push("glasso.max_iter: must be at least 1".into());
        }
        cfg
    }
}

impl BacktestSection {
    pub fn resolve(&self, train: TrainConfig, graph: GraphSource, v: &mut Vec<String>) -> BacktestSpec {
        let d = BacktestSpec::default();
        let models = match &self.models {
            None => d.models.clone(),
            Some(ids) => ids
                .iter()
                .filter_map(|id| match id.parse::<ModelEntry>() {
                    Ok(m) => Some(m),
                    Err(e) => {
                        v.push(format!("backtest.models: {e}"));
                        None
                    }
                })
                .collect(),
        };
        let spec = BacktestSpec {
            window_days: match self.window_days {
                Some(0) => None,
                Some(n) => Some(n),
                None => d.window_days,
            },
            train_months: self.train_months.unwrap_or(d.train_months),
            validation_months: self.validation_months.unwrap_or(d.validation_months),
            refit_months: self.refit_months.unwrap_or(d.refit_months),
            horizons: self.horizons.clone().unwrap_or(d.horizons.clone()),
            models,
            train,
            graph,
            max_windows: self.max_windows.or(d.max_windows),
        };
        v.extend(spec.violations().into_iter().map(|s| format!("backtest: {s}")));
        spec
    }
}

/// Fully resolved synthetic-data settings.
#[derive(Debug, Clone, Serialize)]
pub struct SynthResolved {
    pub n_assets: usize,
    pub n_days: usize,
    pub noise: f64,
    pub space: String,
    pub model: String,
    pub graph: String,
    pub edge_probability: f64,
    pub extra_edges: Vec<[usize; 2]>,
    pub alpha: f64,
    pub beta: [f64; 3],
    pub gamma: Vec<f64>,
    pub delta: [f64; 3],
    pub layers: Vec<Vec<Vec<f64>>>,
    pub burn_in: usize,
    pub return_coupling: f64,
    pub start_date: String,
}

impl SynthSection {
    /// Defaults: a 10-asset ring with two chords driven by a one-layer
    /// GNNHAR in level space, five years of business days.
    pub fn resolve(&self, v: &mut Vec<String>) -> SynthResolved {
        let model = self.model.clone().unwrap_or_else(|| "GNNHAR1L".into());
        let kind = model.parse::<ModelKind>();
        if let Err(e) = &kind {
            v.push(format!("synth.model: {e}"));
        }
        let gnn = matches!(kind, Ok(ModelKind::Gnnhar { .. }));
        let n_assets = self.n_assets.unwrap_or(10);
        let default_extra = if self.n_assets.is_none() && self.graph.is_none() {
            vec![[0, 5], [2, 7]]
        } else {
            vec![]
        };
        let r = SynthResolved {
            n_assets,
            n_days: self.n_days.unwrap_or(252 * 5),
            noise: self.noise.unwrap_or(0.5),
            space: self.space.clone().unwrap_or_else(|| "level".into()),
            model,
            graph: self.graph.clone().unwrap_or_else(|| "ring".into()),
            edge_probability: self.edge_probability.unwrap_or(0.3),
            extra_edges: self.extra_edges.clone().unwrap_or(default_extra),
            alpha: self.alpha.unwrap_or(0.1),
            beta: self.beta.unwrap_or([0.1, 0.05, 0.05]),
            gamma: self
                .gamma
                .clone()
                .unwrap_or_else(|| if gnn { vec![0.38] } else { vec![0.1, 0.05, 0.05] }),
            delta: self.delta.unwrap_or([0.05, 0.0, 0.0]),
            layers: self
                .layers
                .clone()
                .unwrap_or_else(|| vec![vec![vec![1.0], vec![-1.0], vec![0.0]]]),
            burn_in: self.burn_in.unwrap_or(500),
            return_coupling: self.return_coupling.unwrap_or(0.5),
            start_date: self.start_date.clone().unwrap_or_else(|| "2007-07-02".into()),
        };
        if r.n_assets < 2 {
            v.push(format!("synth.n_assets: must be at least 2, got {}", r.n_assets));
        }
        if r.n_days == 0 {
            v.push("synth.n_days: must be at least 1".into());
        }
        if !(r.noise >= 0.0) || !r.noise.is_finite() {
            v.push(format!("synth.noise: must be finite and nonnegative, got {}", r.noise));
        }
        if parse_space(&r.space).is_none() {
            v.push(format!("synth.space: expected `level` or `log`, got `{}`", r.space));
        }
        if !["ring", "path", "complete", "random", "empty"].contains(&r.graph.as_str()) {
            v.push(format!(
                "synth.graph: expected ring, path, complete, random or empty, got `{}`",
                r.graph
            ));
        }
        if !(0.0..=1.0).contains(&r.edge_probability) {
            v.push(format!(
                "synth.edge_probability: must lie in [0, 1], got {}",
                r.edge_probability
            ));
        }
        if let Some(e) = r
            .extra_edges
            .iter()
            .find(|[i, j]| i == j || *i >= r.n_assets || *j >= r.n_assets)
        {
            v.push(format!(
                "synth.extra_edges: invalid edge {e:?} for {} assets",
                r.n_assets
            ));
        }
        if !(0.0..1.0).contains(&r.return_coupling) {
            v.push(format!(
                "synth.return_coupling: must lie in [0, 1), got {}",
                r.return_coupling
            ));
        }
        if chrono::NaiveDate::parse_from_str(&r.start_date, "%Y-%m-%d").is_err() {
            v.push(format!("synth.start_date: expected YYYY-MM-DD, got `{}`", r.start_date));
        }
        match kind {
            Ok(ModelKind::Gnnhar { layers }) => {
                if r.layers.len() != layers {
                    v.push(format!(
                        "synth.layers: {} needs {layers} layer matrices, got {}",
                        r.model,
                        r.layers.len()
                    ));
                }
            }
            Ok(_) if r.gamma.len() != 3 => {
                v.push(format!(
                    "synth.gamma: linear models take 3 entries, got {}",
                    r.gamma.len()
                ));
            }
            _ => {}
        }
        r
    }
}

pub fn parse_space(s: &str) -> Option<DgpSpace> {
    match s {
        "level" => Some(DgpSpace::Level),
        "log" => Some(DgpSpace::Log),
        _ => None,
    }
}

impl EvaluateSection {
    pub fn regime_quantile(&self, v: &mut Vec<String>) -> f64 {
        let q = self.regime_quantile.unwrap_or(0.9);
        if !(q > 0.0 && q < 1.0) {
            v.push(format!("evaluate.regime_quantile: must lie in (0, 1), got {q}"));
        }
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected() {
        let e = toml::from_str::<RunConfig>("seed = 1\n[train]\nlr = 0.1\n").unwrap_err();
        assert!(e.message().contains("lr"), "{}", e.message());
    }

    #[test]
    fn empty_config_parses() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn violations_are_all_reported() {
        let mut v = Vec::new();
        let t = TrainSection {
            learning_rate: Some(-1.0),
            ensemble_size: Some(0),
            ..Default::default()
        }
        .resolve(1);
        let g = GlassoSection {
            folds: Some(1),
            rule: Some("x".into()),
            ..Default::default()
        }
        .resolve(&mut v);
        BacktestSection {
            models: Some(vec!["FOO_M".into()]),
            ..Default::default()
        }
        .resolve(t, GraphSource::Glasso(g), &mut v);
        require_seed(&mut v, None);
        let joined = v.join("\n");
        for needle in [
            "glasso.rule",
            "glasso.folds",
            "FOO",
            "learning_rate",
            "ensemble_size",
            "seed",
        ] {
            assert!(joined.contains(needle), "missing {needle} in\n{joined}");
        }
    }

    #[test]
    fn synth_defaults_are_valid() {
        let mut v = Vec::new();
        let r = SynthSection::default().resolve(&mut v);
        assert!(v.is_empty(), "{v:?}");
        assert_eq!(r.extra_edges, vec![[0, 5], [2, 7]]);
    }

    #[test]
    fn zero_window_days_disables_check() {
        let mut v = Vec::new();
        let s = BacktestSection {
            window_days: Some(0),
            ..Default::default()
        }
        .resolve(
            TrainConfig::default(),
            GraphSource::Glasso(GlassoCvConfig::default()),
            &mut v,
        );
        assert_eq!(s.window_days, None);
    }
}

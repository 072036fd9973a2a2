//! `volgraph`: realized-volatility forecasting pipeline.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
//! Errors are a single stderr line `error[<class>]: <message>`.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use volgraph::ErrorClass;

use commands::{CliError, CliResult};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "volgraph", version, about = "Graph-augmented HAR volatility forecasting")]
struct Cli {
    /// TOML run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output root; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Daily RV panel from intraday prices, written to `<out>/rv/`.
    ComputeRv {
        #[arg(long)]
        intraday: Option<PathBuf>,
        /// Sampling interval in minutes.
        #[arg(long, default_value_t = 5)]
        delta: u32,
        /// Base interval in minutes for subsample averaging.
        #[arg(long, default_value_t = 1)]
        base: u32,
    },
    /// Cross-validated GLASSO graph from returns, written to `<out>/graph/`.
    EstimateGraph {
        #[arg(long)]
        returns: Option<PathBuf>,
    },
    /// Rolling-window backtest, written to `<out>/backtest/`.
    Backtest {
        #[arg(long)]
        rv: Option<PathBuf>,
        #[arg(long)]
        returns: Option<PathBuf>,
        /// Fixed edge list instead of per-window GLASSO.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Report bundle from a backtest directory, written to `<out>/report/`.
    Evaluate {
        /// Directory holding `forecasts.csv` (and optionally `fits.json`, `mad.csv`).
        #[arg(long)]
        forecasts: Option<PathBuf>,
        #[arg(long)]
        rv: Option<PathBuf>,
        #[arg(long)]
        index_rv: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Synthetic panel with a known graph, written to `<out>/data/`.
    Synth,
}

fn resolve_against(base: &std::path::Path, p: &mut Option<PathBuf>) {
    if let Some(x) = p {
        if x.is_relative() {
            *x = base.join(&*x);
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let Some(path) = &cli.config else {
        return Ok(RunConfig::default());
    };
    if !path.exists() {
        return Err(CliError::config(vec![format!(
            "--config: file not found: {}",
            path.display()
        )]));
    }
    let mut cfg = config::load(path).map_err(|m| CliError::config(vec![m]))?;
    let base = path.parent().map(PathBuf::from).unwrap_or_default();
    let d = &mut cfg.data;
    for p in [
        &mut d.rv,
        &mut d.returns,
        &mut d.index_rv,
        &mut d.graph,
        &mut d.intraday,
        &mut d.forecasts,
        &mut cfg.out,
    ] {
        resolve_against(&base, p);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(&cli)?;
    cfg.seed = cli.seed.or(cfg.seed);
    cfg.workers = cli.workers.or(cfg.workers);
    cfg.out = cli.out.clone().or(cfg.out);
    if cfg.workers == Some(0) {
        return Err(CliError::config(vec!["workers: must be at least 1".into()]));
    }
    if let Some(w) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::config(vec![format!("workers: {e}")]))?;
    }
    let set = |slot: &mut Option<PathBuf>, flag: Option<PathBuf>| {
        if flag.is_some() {
            *slot = flag;
        }
    };
    match cli.command {
        Command::ComputeRv { intraday, delta, base } => {
            set(&mut cfg.data.intraday, intraday);
            commands::compute_rv(&cfg, delta, base)
        }
        Command::EstimateGraph { returns } => {
            set(&mut cfg.data.returns, returns);
            commands::estimate_graph(&cfg)
        }
        Command::Backtest { rv, returns, graph } => {
            set(&mut cfg.data.rv, rv);
            set(&mut cfg.data.returns, returns);
            set(&mut cfg.data.graph, graph);
            commands::backtest(&cfg)
        }
        Command::Evaluate {
            forecasts,
            rv,
            index_rv,
            baseline,
        } => {
            set(&mut cfg.data.forecasts, forecasts);
            set(&mut cfg.data.rv, rv);
            set(&mut cfg.data.index_rv, index_rv);
            if baseline.is_some() {
                cfg.evaluate.baseline = baseline;
            }
            commands::evaluate(&cfg)
        }
        Command::Synth => commands::synth(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() && e.kind() != clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[config]: {first}");
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = match e.class {
                ErrorClass::Config => "config",
                ErrorClass::Data => "data",
                ErrorClass::Numerical => "numerical",
            };
            eprintln!("error[{class}]: {}", e.message.replace('\n', "; "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

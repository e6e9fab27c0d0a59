//! Command-line front end: argument parsing, run configuration, manifests
//! and the subcommands.
//!
//! Exit codes: 0 success, 2 input error (bad flags, config or data),
//! 3 numerical failure.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{load_config, parse_config, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    /// One line: `error[input]: ...` or `error[numeric]: ...`.
    pub fn report_line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Input(m) => ("input", m),
            CliError::Numeric(m) => ("numeric", m),
        };
        format!("error[{kind}]: {}", msg.replace(['\n', '\r'], " "))
    }
}

impl From<syncon::Error> for CliError {
    fn from(e: syncon::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(format!("io: {e}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "syncon", version, about = "Synthetic control estimation, simulation and diagnostics")]
pub struct Cli {
    /// Worker threads for Monte Carlo and placebo grids. Output does not
    /// depend on it.
    #[arg(long, global = true, env = "SYNCON_WORKERS")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one estimator to a panel.
    Fit(FitArgs),
    /// Draw one panel from a factor model.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo experiment.
    Mc(McArgs),
    /// Large-T0 limit weights, bias and variance.
    Asymptotics(AsymptoticsArgs),
    /// One-step-ahead placebo RMSE for every unit.
    Placebo(PlaceboArgs),
    /// De-trend by the control average and plot the fit before and after.
    Detrend(DetrendArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output.directory`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PanelArgs {
    /// Long CSV with header `unit,period,outcome`.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub treated: Option<String>,
    /// First post-treatment period.
    #[arg(long = "treat-period", allow_negative_numbers = true)]
    pub treat_period: Option<i64>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub panel: PanelArgs,
    /// sc, sc_demeaned, did, sc_mean_predictor, sc_iv, ife:<r>, custom:<constraints>.
    #[arg(long, default_value = "sc")]
    pub method: String,
    /// Weight constraints such as `nonneg,sum1,intercept`; replaces those of
    /// the method.
    #[arg(long)]
    pub constraints: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pre-treatment periods.
    #[arg(long)]
    pub t0: usize,
    /// Post-treatment periods.
    #[arg(long, default_value_t = 1)]
    pub t1: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replication stream within the seed.
    #[arg(long, default_value_t = 0)]
    pub stream: u64,
}

#[derive(Debug, Clone, Args)]
pub struct McArgs {
    #[command(flatten)]
    pub common: Common,
    /// Base seed (overrides `mc.base_seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replications per cell (overrides `mc.reps`).
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AsymptoticsArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct PlaceboArgs {
    #[command(flatten)]
    pub common: Common,
    /// Long CSV with header `unit,period,outcome`.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Window as `first:last` period labels.
    #[arg(long)]
    pub window: Option<String>,
    /// Comma-separated methods; the first is the x axis of the scatter plots.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub min_train: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DetrendArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub panel: PanelArgs,
    /// Weight estimator for the synthetic unit; must impose adding-up.
    #[arg(long, default_value = "sc")]
    pub method: String,
}

/// Run a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let workers = cli.workers.unwrap_or_else(default_workers);
    if workers == 0 {
        return Err(CliError::Input("--workers must be at least 1".into()));
    }
    match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Mc(a) => commands::mc(&a, workers),
        Command::Asymptotics(a) => commands::asymptotics(&a),
        Command::Placebo(a) => commands::placebo(&a, workers),
        Command::Detrend(a) => commands::detrend(&a),
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

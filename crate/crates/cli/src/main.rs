mod commands;
mod formats;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Calibrate drifting sensor networks and crowd labelers from pairwise
/// colocations.
#[derive(Parser, Debug)]
#[command(name = "calibnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic data set with ground truth.
    Simulate(SimulateArgs),
    /// Fit the variational calibration model to colocation data.
    CalibrateVi(CalibrateViArgs),
    /// Calibrate through the windowed rendezvous graph.
    CalibrateMultihop(CalibrateMultihopArgs),
    /// Fit labeler confusion processes and predict item classes.
    CalibrateCat(CalibrateCatArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Choose the multi-hop window size and edge-weight ratio on held-out truth.
    GridsearchMultihop(GridsearchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Pollution,
    Drift,
    Categorical,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(value_enum)]
    kind: DataKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenario overrides (TOML); defaults otherwise.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario's noise scale (pollution and drift).
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateViArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    colocations: PathBuf,
    #[arg(long)]
    sensors: PathBuf,
    /// CSV with `sensor,time[,raw]` columns to predict at.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Overrides `optimizer.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CalibrateMultihopArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    colocations: PathBuf,
    #[arg(long)]
    sensors: PathBuf,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Overrides `multihop.delta` (hours).
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args, Debug)]
struct CalibrateCatArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    labelers: PathBuf,
    /// Ground truth for the training items; every other labelled item is
    /// predicted.
    #[arg(long)]
    truth: PathBuf,
    /// CSV with an `item_id` column naming the items to predict, labelled
    /// or not; defaults to the labelled items missing from `--truth`.
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalKind {
    Continuous,
    Categorical,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(value_enum)]
    kind: EvalKind,
    /// `calibrated.csv` (continuous) or `posteriors.csv` (categorical).
    #[arg(long)]
    predictions: PathBuf,
    /// `tests.csv` (continuous) or an `item_id,label` CSV (categorical).
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GridsearchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    colocations: PathBuf,
    #[arg(long)]
    sensors: PathBuf,
    /// Held-out readings with truth (`tests.csv`).
    #[arg(long)]
    tests: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::CalibrateVi(a) => commands::calibrate_vi(a),
        Command::CalibrateMultihop(a) => commands::calibrate_multihop(a),
        Command::CalibrateCat(a) => commands::calibrate_cat(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::GridsearchMultihop(a) => commands::gridsearch(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `hvi`: simulate datasets, fit hybrid VI models, evaluate, compare, and
//! draw Lek profiles.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_vi::simulate::Example;
use hybrid_vi::Mode;

use crate::config::{parse_grid, Family, Grid};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Parser, Debug)]
#[command(name = "hvi", version, about = "Hybrid variational inference for mixed and deep mixed models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated dataset with its truth record.
    Simulate(SimulateArgs),
    /// Fit a model by natural-gradient (NG-HVI) or ordinary-gradient (SG-HVI) ascent.
    Fit(FitArgs),
    /// Posterior predictive metrics for a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Fit both modes per seed on a simulated example and tabulate metrics.
    Compare(CompareArgs),
    /// Lek profiles of a fitted DMM.
    Lek(LekArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_parser = parse_example)]
    pub example: Example,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of groups.
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Random-effect to noise variance ratio (ex1).
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub train_per_group: Option<usize>,
    #[arg(long)]
    pub test_per_group: Option<usize>,
    #[arg(long)]
    pub validation_per_group: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Experiment JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub family: Option<Family>,
    /// Hidden widths, e.g. `5,5`.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of factors in the covariance.
    #[arg(long)]
    pub p: Option<usize>,
    /// Damping factor δ.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub a_m: Option<f64>,
    #[arg(long)]
    pub trace_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation (test) dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Training dataset; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long = "J")]
    pub j: Option<usize>,
    #[arg(long = "R")]
    pub r: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics JSON path; defaults to `metrics.json` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-point `train_points.csv` and `test_points.csv`.
    #[arg(long)]
    pub dump_points: bool,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long, value_parser = parse_example)]
    pub example: Example,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long = "J", default_value_t = hybrid_vi::evaluate::DEFAULT_J)]
    pub j: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Run seeds concurrently; modes within a seed stay sequential.
    #[arg(long)]
    pub parallel_seeds: bool,
}

#[derive(Args, Debug)]
pub struct LekArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// 1-based input column as named in the CSV (`x2` is the first covariate).
    #[arg(long)]
    pub input: usize,
    /// `lo:hi:n` or a comma list.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Grid,
    /// Full input row including the offset, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    pub reference: Vec<f64>,
    /// 1-based group ids, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub groups: Vec<usize>,
    /// Average over draws of (θ, α) instead of posterior means.
    #[arg(long)]
    pub full_draws: bool,
    #[arg(long = "J", default_value_t = hybrid_vi::evaluate::DEFAULT_J)]
    pub j: usize,
    #[arg(long = "R", default_value_t = hybrid_vi::evaluate::DEFAULT_R)]
    pub r: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_example(s: &str) -> Result<Example, String> {
    s.parse().map_err(|e: hybrid_vi::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: hybrid_vi::Error| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<hybrid_vi::Error>() {
            return if e.is_numeric() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Lek(a) => commands::lek(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

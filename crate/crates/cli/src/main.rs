//! `moelab`: train a toy teacher, compress it, calibrate routers, and analyze
//! the result.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moelab::optim::OptimizerKind;

use crate::config::Method;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "moelab", version, about = "Mixture-of-experts compression lab")]
pub struct Cli {
    /// Run configuration (JSON). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for the model and corpus (train-teacher) or the spot checks (analyze).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Run directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the corpus and train the dense teacher.
    TrainTeacher(TrainArgs),
    /// Prune, edit or merge the teacher's experts.
    Compress(CompressArgs),
    /// Distill the teacher's routing into a student's routers.
    Calibrate(CalibrateArgs),
    /// Compare a student with its teacher and write an analysis directory.
    Analyze(AnalyzeArgs),
    /// Tabulate analyses from one or more run directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Defaults to `<run>/teacher.moec`.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub retention: Option<f64>,
    #[arg(long)]
    pub rank_ratio: Option<f64>,
    #[arg(long)]
    pub target: Option<usize>,
    /// Defaults to `<run>/calib.jsonl`.
    #[arg(long)]
    pub calib: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub max_samples: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub student: PathBuf,
    /// Compression map of the student; omit for an identity correspondence.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Defaults to `<run>/heldout.jsonl`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Defaults to `<run>/analysis_<student>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub spot_checks: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Where `report.csv` and `report.txt` go; defaults to the first run.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(format!("unknown optimizer '{s}' (expected adam or sgd)")),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| error::CliError::Config(format!("--threads: {e}")))?;
    }
    commands::dispatch(&cli)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOELAB_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("moelab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

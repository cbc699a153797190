//! `mlad`: parse, prepare, train, score and evaluate log anomaly detectors.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod manifest;
mod prepared;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlad_core::MladError;

#[derive(Parser)]
#[command(name = "mlad", version, about = "Multi-system log anomaly detection")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine templates from a raw log; writes templates.txt and keys.txt.
    Parse(ParseArgs),
    /// Cut parsed logs into labeled windows and a train/test split.
    Prepare(PrepareArgs),
    /// Train a model on a prepared directory's training windows.
    Train(TrainArgs),
    /// Score prepared windows with a trained model.
    Score(ScoreArgs),
    /// Run a full experiment and write a report.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct ParseArgs {
    /// Raw log file, one message per line.
    pub log: PathBuf,
    /// Parser settings (TOML); defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PrepareArgs {
    /// Directory written by `mlad parse`.
    #[arg(long, conflicts_with_all = ["synthetic", "fuse"])]
    pub parsed: Option<PathBuf>,
    /// Per-line 0/1 labels, or a `session_id,label` CSV with --session-id-regex.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Raw log the parsed keys came from; needed to extract session ids.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Group lines by the first match of this pattern instead of sliding windows.
    #[arg(long)]
    pub session_id_regex: Option<String>,
    /// Generate a labeled synthetic corpus for system A or B.
    #[arg(long, conflicts_with = "fuse")]
    pub synthetic: Option<String>,
    /// Number of synthetic windows.
    #[arg(long, default_value_t = 10_000)]
    pub windows: usize,
    /// Prepared directories to fuse into one multi-system set.
    #[arg(long, num_args = 2..)]
    pub fuse: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    /// System name recorded on every window; defaults to the parsed directory name.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct TrainFlags {
    /// Training settings (TOML, with an optional [model] table).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Embedding width when no table is imported.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Args, Clone)]
pub struct PolicyFlags {
    /// Flag windows above this quantile of the training scores.
    #[arg(long, conflicts_with = "rho")]
    pub quantile: Option<f64>,
    /// Flag this fraction of the scored windows.
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory written by `mlad prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// Imported `#dim` vector table; hashed embeddings otherwise.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Train a variant: none, no_entmax or no_gmm.
    #[arg(long, default_value = "none")]
    pub ablate: String,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Checkpoint written by `mlad train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Which windows to score: test, train or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyFlags,
    /// Append the latent code columns h0.. to the scores.
    #[arg(long)]
    pub codes: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Prepared directories; one system each.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// Train on all --data systems fused together.
    #[arg(long)]
    pub fuse: bool,
    /// Score these prepared systems with a model trained on --data.
    #[arg(long)]
    pub target: Vec<PathBuf>,
    /// Comma-separated variants (no_entmax, no_gmm); the full model is always included.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<String>,
    /// Comma-separated alpha values.
    #[arg(long, value_delimiter = ',')]
    pub alpha_sweep: Vec<f64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub policy: PolicyFlags,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(err: &MladError) -> u8 {
    match err {
        MladError::Config(_) => 1,
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Parse(a) => commands::parse(a),
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Score(a) => commands::score(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

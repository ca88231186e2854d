//! `confit`: dataset generation, continual training, evaluation, shift
//! diagnostics, the property suite and the linear-model theory checks.
//!
//! Exit codes: 0 success, 2 configuration or schema error, 3 data error or
//! missing path, 4 verification failure, 5 theory-bound violation, 64
//! command-line usage error, 1 internal error. Failures print one JSON object
//! on stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "confit", version, about = "Continual fine-tuning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task sequence into a dataset directory.
    GenData(GenDataArgs),
    /// Train a model continually over a dataset (or run the ablation grid).
    Train(TrainArgs),
    /// Evaluate one task of a checkpoint on its test split.
    Eval(EvalArgs),
    /// Compute per-layer mean-shift diagnostics from two checkpoints.
    Diag(DiagArgs),
    /// Run the randomized property suite.
    Verify(VerifyArgs),
    /// Check the linear-model bounds on random instances.
    Theory(TheoryArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON task-sequence spec; inline flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of tasks.
    #[arg(long)]
    pub num_tasks: Option<usize>,
    /// Classes per task.
    #[arg(long)]
    pub classes_per_task: Option<usize>,
    /// Training samples per class.
    #[arg(long)]
    pub train_per_class: Option<usize>,
    /// Test samples per class.
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Per-pixel observation noise standard deviation.
    #[arg(long)]
    pub noise_scale: Option<f64>,
    /// Classes of the pretext task; 0 disables it.
    #[arg(long)]
    pub pretext_classes: Option<usize>,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON run configuration (`{"train": {...}, "data": {...}}`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    pub out: PathBuf,
    /// Normalization statistics: one shared set, per task, or per task with cross-convolution mean recovery.
    #[arg(long, value_parser = ["shared", "task", "xconv"])]
    pub bn_mode: Option<String>,
    /// Fine-tuning schedule: plain, three-stage hierarchical, linear probing only, or one model per task.
    #[arg(long, value_parser = ["plain", "hierarchical", "lp", "stl"])]
    pub schedule: Option<String>,
    /// Run {plain, hierarchical} x {shared, task, xconv} and write grid.csv.
    #[arg(long, conflicts_with_all = ["bn_mode", "schedule", "resume", "tasks"])]
    pub grid: bool,
    /// Seeds per grid cell, starting at the configured seed.
    #[arg(long, default_value_t = 1, requires = "grid")]
    pub seeds: u64,
    /// Continue the run stored in this checkpoint directory (its stored
    /// configuration is used).
    #[arg(long, conflicts_with_all = ["config", "bn_mode", "schedule"])]
    pub resume: Option<PathBuf>,
    /// Stop once this many tasks have been trained.
    #[arg(long)]
    pub tasks: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Zero-based task index.
    #[arg(long)]
    pub task: usize,
    /// Which normalization moments to use (`t-*` use the test batch's own).
    #[arg(long, value_parser = ["running", "t-mean", "t-var", "t-both"], default_value = "running")]
    pub moments: String,
    /// Also write the result JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DiagArgs {
    /// Checkpoint taken right after the first task.
    #[arg(long)]
    pub ckpt_after_1: PathBuf,
    /// Checkpoint taken after the last task.
    #[arg(long)]
    pub ckpt_final: PathBuf,
    /// Dataset directory; probes use the first task's test split.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory receiving deltas.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Randomized cases per property (gradient and drift checks use at most 50).
    #[arg(long, default_value_t = 200)]
    pub cases: usize,
    /// Seed of the case generator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TheoryArgs {
    /// Feature dimension (rows of B).
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Samples per task.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Input dimension.
    #[arg(long, default_value_t = 50)]
    pub d: usize,
    /// Randomized bound instances.
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    /// Seed of the first instance.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving theory_report.json and theory_bounds.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            return report(CliError::usage(message.trim()));
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Diag(a) => commands::diag(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Theory(a) => commands::theory(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    let body = serde_json::json!({ "error": e.kind, "message": e.message, "exit_code": e.code });
    eprintln!("{body}");
    ExitCode::from(e.code)
}

//! `iclseg` — end-to-end workflow for in-context segmentation on synthetic
//! video corpora: generate a corpus, pick an annotation budget, train the
//! canvas-inpainting model (or the no-context baseline), evaluate held-out
//! frames, and sweep ablation grids.
//!
//! Exit codes: `0` success, `1` runtime failure (missing files, corrupt
//! data, diverged training), `2` invalid configuration or flags.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// An error on its way out of the process: `usage` selects exit code 2
/// (configuration mistakes) over 1 (runtime failures).
#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub usage: bool,
}

impl CliError {
    pub fn usage(message: String) -> CliError {
        CliError { message, usage: true }
    }

    pub fn runtime(message: String) -> CliError {
        CliError { message, usage: false }
    }
}

impl From<iclseg::Error> for CliError {
    fn from(e: iclseg::Error) -> CliError {
        CliError {
            usage: matches!(e, iclseg::Error::InvalidConfig { .. }),
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "iclseg",
    version,
    about = "In-context video segmentation: synthesize, split, train, evaluate, ablate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video corpus (PNG frames plus manifest).
    Synth(SynthArgs),
    /// Select each video's annotated frames under a labeling budget.
    Split(SplitArgs),
    /// Train the canvas-inpainting model or the no-context baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a split's held-out frames.
    Eval(EvalArgs),
    /// Train and evaluate a grid of settings; tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for frames and the corpus manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the synthesis seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct SplitArgs {
    /// Corpus manifest (corpus.json) to split.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output path for the split manifest JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the annotated fraction per video.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Override the split seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus manifest (corpus.json).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Split manifest produced by `iclseg split`.
    #[arg(long)]
    pub split: PathBuf,
    /// Output directory (checkpoint.ckpt, train_log.ndjson, resolved config).
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the small single-core model profile.
    #[arg(long)]
    pub toy: bool,
    /// Save the first batch of composed canvases as PNGs for inspection.
    #[arg(long)]
    pub dump_canvas: bool,
    /// Train the no-context query-only baseline instead.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate (objective is read from its metadata).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus manifest (corpus.json).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Split manifest produced by `iclseg split`.
    #[arg(long)]
    pub split: PathBuf,
    /// Output directory (report.json, resolved config).
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the fraction of patches masked at test time.
    #[arg(long)]
    pub test_mask_ratio: Option<f64>,
    /// Override the binarization threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Override the evaluation seed (test-time mask draws).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write prediction-contour overlays into this directory.
    #[arg(long)]
    pub overlays: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Corpus manifest (corpus.json).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Split manifest produced by `iclseg split`.
    #[arg(long)]
    pub split: PathBuf,
    /// Grid JSON listing the axis values to sweep.
    #[arg(long)]
    pub grid: PathBuf,
    /// Output directory (results.json, results.csv, per-run artifacts).
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment config JSON used as the base for every run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the training seed of every run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the small single-core model profile.
    #[arg(long)]
    pub toy: bool,
    /// Number of worker threads running training groups.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => commands::cmd_synth(&args),
        Command::Split(args) => commands::cmd_split(&args),
        Command::Train(args) => commands::cmd_train(&args),
        Command::Eval(args) => commands::cmd_eval(&args),
        Command::Ablate(args) => commands::cmd_ablate(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(if e.usage { 2 } else { 1 })
        }
    }
}

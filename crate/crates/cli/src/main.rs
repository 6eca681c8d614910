mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use brainmt_core::{BrainError, FrameSampling, ScanOrder, Task};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "brainmt", version, about = "Hybrid Mamba-attention model for 4-D volumetric time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Command-line values override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model preset: paper, desk, large or small (default desk).
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub scan_order: Option<ScanOrder>,
    /// Frames per sample.
    #[arg(long, global = true)]
    pub frames: Option<usize>,
    #[arg(long, global = true)]
    pub frame_sampling: Option<FrameSampling>,
    #[arg(long, global = true)]
    pub task: Option<Task>,
    /// Directory receiving every output file.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (volumes, label sidecars, manifest).
    Generate(Generate),
    /// Train on a dataset's train split, or cross-validate with --folds.
    Train(Train),
    /// Evaluate a checkpoint on a dataset split.
    Eval(Eval),
    /// Integrated-gradients attribution for one subject.
    Attribute(Attribute),
    /// Activation counts and forward timings over a list of T.
    Bench(Bench),
}

#[derive(Args, Debug)]
pub struct Generate {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n_subjects: Option<usize>,
    /// Recording length per subject (defaults to --frames).
    #[arg(long)]
    pub frames_total: Option<usize>,
    /// Spatial extents: `32` or `32x32x32`.
    #[arg(long)]
    pub dims: Option<String>,
}

#[derive(Args, Debug)]
pub struct Train {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Permute every subject's frames (control condition).
    #[arg(long)]
    pub shuffle_frames: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Eval {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct Attribute {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Subject id (defaults to the first test subject).
    #[arg(long)]
    pub subject: Option<String>,
    #[arg(long, default_value_t = 256)]
    pub steps: usize,
    #[arg(long, default_value_t = 20)]
    pub top_k: usize,
}

#[derive(Args, Debug)]
pub struct Bench {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated frame counts, e.g. `16,32`.
    #[arg(long, default_value = "16,32")]
    pub t_list: String,
}

fn set_threads() -> Result<(), BrainError> {
    let Ok(raw) = std::env::var("BRAINMT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| BrainError::Usage(format!("BRAINMT_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| BrainError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = set_threads().and_then(|_| match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Attribute(a) => commands::attribute(a),
        Command::Bench(a) => commands::bench(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `shadowpc`: dataset generation, training, completion and evaluation.
//!
//! Exit codes: 0 on success, 2 for usage errors, 3 for I/O and runtime
//! failures.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use shadowpc::completion::Ablation;
use shadowpc::data::Family;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<shadowpc::Error> for CliError {
    fn from(e: shadowpc::Error) -> Self {
        use shadowpc::Error as E;
        match e {
            E::InvalidArgument(_) | E::DegenerateRay { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "shadowpc", version, about = "Point cloud completion along camera rays")]
pub struct Cli {
    /// Seed for generation, initialization, batching and camera noise.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 gives single-threaded, byte-reproducible runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// JSON file whose keys supply flags not given on the command line.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of scans and ground-truth tiers.
    GenData(GenDataArgs),
    /// Train the completion model.
    Train(TrainArgs),
    /// Complete one scan or every scan of a dataset split.
    Complete(CompleteArgs),
    /// Score completions against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Points per scan.
    #[arg(long, default_value_t = 256)]
    pub partial: usize,
    #[arg(long, default_value_t = 1024)]
    pub gt1: usize,
    #[arg(long, default_value_t = 256)]
    pub gt2: usize,
    #[arg(long, default_value_t = 2048)]
    pub gt3: usize,
    /// Size of the dense surface sample the scan is carved from.
    #[arg(long, default_value_t = 1 << 21)]
    pub dense: usize,
    /// Angular bins per axis of the occlusion buffer.
    #[arg(long, default_value_t = 128)]
    pub bins: usize,
    #[arg(long, default_value_t = 1.5)]
    pub cam_distance: f64,
    /// Comma-separated families (sphere, box, cylinder, lamp-like, chair-like).
    #[arg(long, value_delimiter = ',')]
    pub families: Vec<Family>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// 1, 2, 3 or all.
    #[arg(long, default_value = "all")]
    pub stage: String,
    /// Optimizer steps per stage.
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long)]
    pub points_per_ray: Option<usize>,
    #[arg(long)]
    pub ablate: Option<Ablation>,
    /// Standard deviation of the camera perturbation during training.
    #[arg(long, default_value_t = 0.0)]
    pub cam_noise: f64,
    /// Per-layer decay of the refinement bound.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Start from the parameters of this checkpoint.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue the run that wrote this checkpoint, optimizer state included.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scan to complete (single mode).
    #[arg(long, requires = "cam")]
    pub input: Option<PathBuf>,
    /// Camera position as x,y,z (single mode).
    #[arg(long, allow_hyphen_values = true)]
    pub cam: Option<String>,
    /// Dataset root (batch mode).
    #[arg(long, conflicts_with = "input")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output file (single mode) or directory (batch mode).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the intermediate clouds next to each output.
    #[arg(long)]
    pub emit_trace: bool,
    /// Standard deviation of the camera perturbation.
    #[arg(long, default_value_t = 0.0)]
    pub cam_noise: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding `<sample_id>.ply` completions.
    #[arg(long, required_unless_present_any = ["self_check", "baseline"])]
    pub results: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = shadowpc::metrics::DEFAULT_FSCORE_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = shadowpc::metrics::DEFAULT_SCD_RADIUS)]
    pub radius: f64,
    #[arg(long, default_value_t = shadowpc::metrics::DEFAULT_DCD_TEMP)]
    pub temp: f64,
    /// Directory for `metrics.jsonl` and `aggregate.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score the finest ground-truth tier against itself.
    #[arg(long, conflicts_with = "baseline")]
    pub self_check: bool,
    /// Score the repeated scan instead of stored completions.
    #[arg(long)]
    pub baseline: bool,
}

/// Whether `sub` (or the global flags for `None`) has a `--key` flag.
fn accepts(sub: Option<&str>, key: &str) -> bool {
    let cmd = Cli::command();
    let owner = match sub {
        None => Some(&cmd),
        Some(s) => cmd.find_subcommand(s),
    };
    owner.is_some_and(|c| c.get_arguments().any(|a| a.get_long() == Some(key)))
}

fn run() -> Result<(), CliError> {
    let mut args: Vec<String> = std::env::args().collect();
    if let Some(path) = config::config_path(&args) {
        args = config::merge(args, std::path::Path::new(&path), &accepts)?;
    }
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Err(CliError::Usage(String::new())) } else { Ok(()) };
        }
    };
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    match &cli.command {
        Command::GenData(a) => commands::gen_data(&cli, a),
        Command::Train(a) => commands::train(&cli, a),
        Command::Complete(a) => commands::complete(&cli, a),
        Command::Eval(a) => commands::eval(&cli, a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(&e, CliError::Usage(m) if m.is_empty()) {
                eprintln!("{e}");
            }
            ExitCode::from(e.code())
        }
    }
}

//! `threetconv` command-line driver.
//!
//! Every subcommand reads defaults, then an optional JSON `--config` file,
//! then flags, writes its artifacts and a `run.json` manifest into `--out`,
//! and exits 0 on success, 2 on usage or validation errors and 3 on
//! numerical failures.

mod analyze;
mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "threetconv",
    version,
    about = "Temporally factorized 3D convolution toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic motion or appearance dataset.
    Gen(GenFlags),
    /// Train TinyT on a dataset and write a checkpoint.
    Train(TrainFlags),
    /// Score a checkpoint on a dataset.
    Eval(EvalFlags),
    /// Statistics, distributions, trajectories and probes of a checkpoint.
    Analyze(AnalyzeFlags),
    /// Compare analytic and finite-difference gradients of a model's loss.
    Gradcheck(GradcheckFlags),
    /// Turn a bank of 2D filters into factorized filters with identity transforms.
    Import2d(Import2dFlags),
    /// Write the filter banks of a checkpoint.
    Export(ExportFlags),
}

/// Options shared by every subcommand.
#[derive(Args, Serialize)]
pub struct Common {
    /// JSON file supplying any option; flags win over it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Worker threads (0 uses every core).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct GenFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// motion6, motion9 or appearance6.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<String>,
    /// Number of clips.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    /// Translation per frame in pixels.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub translate_px: Option<f64>,
    /// Rotation per frame in degrees.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotate_deg: Option<f64>,
    /// Relative zoom per frame.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    /// Relative per-frame jitter of the motion magnitude.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
}

#[derive(Args, Serialize)]
pub struct TrainFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Training dataset directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Validation dataset directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    /// Architecture; only `tinyt`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    /// `3t` (factorized) or `3d` (dense).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// `random` or `import2d`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
    /// Bank directory used by `--init import2d`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    /// Learning-rate multiplier for the transform parameters.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temporal_lr_mult: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_scale: Option<f64>,
    /// `constant` or `cosine`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    /// Seeds initialization and shuffling.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize)]
pub struct EvalFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct AnalyzeFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Further checkpoints sharing the histogram axes (repeatable).
    #[arg(long)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub compare: Vec<PathBuf>,
    /// Dataset for saliency and motion recovery.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// `layer:filter` trajectories to plot (repeatable).
    #[arg(long)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<String>,
    /// `layer:channel` saliency maps (repeatable, needs --data).
    #[arg(long)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub saliency: Vec<String>,
    /// `layer:channel` activation maximization (repeatable).
    #[arg(long)]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub actmax: Vec<String>,
    /// Clip index used for saliency.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actmax_steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actmax_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actmax_decay: Option<f64>,
    /// Motion recovery of a factorized layer against --data.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub recovery: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovery_layer: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top: Option<usize>,
    /// Also run a loss gradient check on the checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub gradcheck: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize)]
pub struct GradcheckFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Check this checkpoint instead of a fresh TinyT.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    /// Clips in the random batch.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    /// Elements checked per parameter tensor.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_elements: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// Retries of a flagged element at a ten times smaller step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize)]
pub struct Import2dFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Bank directory of depth-1 layers.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank: Option<PathBuf>,
    /// Temporal depth per layer, in manifest order (comma separated).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub depths: Vec<usize>,
    /// Divide each base by its depth so constant clips keep 2D responses.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub average: bool,
}

#[derive(Args, Serialize)]
pub struct ExportFlags {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Also write every factorized bank materialized as dense filters.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub dense: bool,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let numerical = e.chain().any(|c| {
            c.downcast_ref::<threetconv::Error>()
                .is_some_and(threetconv::Error::is_numerical)
        });
        if numerical {
            Failure::Numerical(e)
        } else {
            Failure::Usage(e)
        }
    }
}

impl From<threetconv::Error> for Failure {
    fn from(e: threetconv::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.into())
    }
}

pub type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(f) => commands::gen(f),
        Command::Train(f) => commands::train(f),
        Command::Eval(f) => commands::eval(f),
        Command::Analyze(f) => analyze::run(f),
        Command::Gradcheck(f) => commands::gradcheck(f),
        Command::Import2d(f) => commands::import2d(f),
        Command::Export(f) => commands::export(f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::Usage(e) | Failure::Numerical(e)) = &failure;
            eprintln!("error: {e:#}");
            ExitCode::from(failure.code())
        }
    }
}

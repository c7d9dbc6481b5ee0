use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Stereo matching with displacement-invariant cost computation.
#[derive(Debug, Parser)]
#[command(name = "dicc", version, args_override_self = true)]
pub struct Cli {
    /// key=value file of flags for the subcommand; command-line flags take
    /// precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "DICC_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random-dot stereogram dataset with train/val manifests.
    GenRds(GenRdsArgs),
    /// Train a model and write checkpoints plus an epoch log.
    Train(TrainArgs),
    /// Predict disparity (and optionally entropy) for one stereo pair.
    Infer(InferArgs),
    /// Score predicted disparity maps against ground truth.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Report parameters, flops and peak activation memory.
    EstimateResources(ResourceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Tiny,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Table,
    Kv,
    Both,
}

#[derive(Debug, Args)]
pub struct GenRdsArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    /// Probability of a white dot.
    #[arg(long, default_value_t = 0.5)]
    pub density: f64,
    /// Disparities are drawn below this value; must be less than --width.
    #[arg(long, default_value_t = 24)]
    pub max_disp: usize,
    /// Foreground shapes per sample.
    #[arg(long, default_value_t = 3)]
    pub shapes: usize,
    /// Fraction of samples written to the validation manifest.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation manifest.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProfileArg::Tiny)]
    pub profile: ProfileArg,
    /// Maximum disparity D (multiple of 3); ground truth at or above it is ignored.
    #[arg(long, default_value_t = 24)]
    pub max_disp: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Weight of the refined-output loss term.
    #[arg(long, default_value_t = 1.25)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random training window as HxW, e.g. 48x96.
    #[arg(long)]
    pub crop: Option<String>,
    /// Control run: the matching net sees only left features.
    #[arg(long)]
    pub context_only: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint written after every epoch; the best validation epoch also
    /// goes to NAME.best.EXT.
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch log (appended); defaults to the checkpoint path plus `.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Left image (PGM or PPM).
    #[arg(long)]
    pub left: PathBuf,
    /// Right image (PGM or PPM).
    #[arg(long)]
    pub right: PathBuf,
    /// Refined disparity output (PFM).
    #[arg(long)]
    pub out_disp: PathBuf,
    /// Entropy map output (PFM).
    #[arg(long)]
    pub out_entropy: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Sequential)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One predicted PFM per line (or a dataset manifest; last column used).
    #[arg(long)]
    pub pred_manifest: PathBuf,
    /// Ground truth PFMs, one per line or as a dataset manifest.
    #[arg(long)]
    pub gt_manifest: PathBuf,
    /// Ground truth at or above this value is ignored.
    #[arg(long, default_value_t = 192)]
    pub max_disp: usize,
    /// Comma-separated bad-pixel thresholds.
    #[arg(long, default_value = "1,2,3,4", value_delimiter = ',')]
    pub thresholds: Vec<f64>,
    #[arg(long, value_enum, default_value_t = FormatArg::Both)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ProfileArg::Tiny)]
    pub profile: ProfileArg,
    /// Tolerance for multi-layer composites; single operations use 1e-5.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Test hook: adds an operation with a broken backward pass.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct ResourceArgs {
    #[arg(long, value_enum, default_value_t = ProfileArg::Full)]
    pub profile: ProfileArg,
    #[arg(long, default_value_t = 540)]
    pub height: usize,
    #[arg(long, default_value_t = 960)]
    pub width: usize,
    #[arg(long, default_value_t = 192)]
    pub max_disp: usize,
    /// Image channels.
    #[arg(long, default_value_t = 3)]
    pub in_channels: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Both)]
    pub format: FormatArg,
}

//! `minifocus` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 pipeline error.
//! Failures print one `error[<kind>]: <message>` line on stderr.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "minifocus", version, about = "Focal-stack augmentation and shape-from-focus tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a built-in synthetic focal stack.
    Simulate(SimulateArgs),
    /// Estimate the AiF image and EOD maps of a stack.
    Augment(AugmentArgs),
    /// Tabulate EOD and focus-measure energy against blur.
    Verify(VerifyArgs),
    /// Classical depth from a focus volume.
    Depth(DepthArgs),
    /// Run (and optionally overfit) the learned refiner.
    Refine(RefineArgs),
    /// Compare hand-written gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Score a depth map against ground truth.
    Metrics(MetricsArgs),
    /// augment, depth or refine, then metrics.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Builtin {
    /// 64x64 two-plane step scene.
    Step64,
    /// 32x32 two-plane step scene.
    Step32,
    /// 64x64 linear depth ramp.
    Ramp64,
    /// Uniform Gaussian blurs of the 64x64 synthetic texture, one per sigma.
    Fig1,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub builtin: Builtin,
    /// Focus distances, one per slice.
    #[arg(long, value_delimiter = ',', default_value = "1.0,3.0")]
    pub focus: Vec<f64>,
    /// Camera blur constant.
    #[arg(long = "C", default_value_t = 2.0, allow_negative_numbers = true)]
    pub blur_constant: f64,
    /// Blur radii for `fig1`.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1.0,1.5,2.0")]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub near: f64,
    #[arg(long, default_value_t = 3.0)]
    pub far: f64,
    #[arg(long, default_value_t = minifocus::defocus_sim::DEFAULT_LAYERS)]
    pub layers: usize,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Existing output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EodArg {
    PerChannel,
    Luminance,
}

#[derive(Args)]
pub struct AugmentFlags {
    /// 1-based slice indices to keep, in increasing order.
    #[arg(long, value_delimiter = ',')]
    pub select: Option<Vec<usize>>,
    /// Softmax temperature of the AiF fusion.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// 3x3 mean of each focus measure before fusion.
    #[arg(long)]
    pub smooth: bool,
    #[arg(long, value_enum, default_value = "per-channel")]
    pub eod: EodArg,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub flags: AugmentFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Image to analyse; the synthetic texture when omitted.
    #[arg(long)]
    pub aif: Option<PathBuf>,
    /// Side of the synthetic texture.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1.0,1.5,2.0")]
    pub sigmas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DepthMethod {
    Wta,
    Soft,
}

#[derive(Args)]
pub struct DepthFlags {
    #[arg(long = "depth-method", id = "depth_method", value_enum, default_value = "wta")]
    pub method: DepthMethod,
    /// Soft-argmax temperature.
    #[arg(long, default_value_t = 1.0)]
    pub depth_temperature: f64,
    /// Median filter radius; 0 disables it.
    #[arg(long, default_value_t = 0)]
    pub median: usize,
}

#[derive(Args)]
pub struct DepthArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub select: Option<Vec<usize>>,
    #[command(flatten)]
    pub flags: DepthFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RefineFlags {
    /// Refiner configuration JSON; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parameters to start from instead of a fresh initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Gradient steps on the input stack (needs ground truth).
    #[arg(long, default_value_t = 0)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Initialization seed; overrides the config's.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub augmented: PathBuf,
    #[command(flatten)]
    pub flags: RefineFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Single target to check; all when omitted.
    #[arg(long)]
    pub op: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the rows as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args)]
pub struct MaskFlags {
    /// Exclude pixels within this many pixels of a depth edge; three times
    /// the widest blur of the stack when omitted.
    #[arg(long)]
    pub margin: Option<usize>,
    /// Minimum AiF focus measure of a scored pixel.
    #[arg(long, default_value_t = 1e-6)]
    pub threshold: f64,
}

#[derive(Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value = "focus_distance")]
    pub pred_unit: minifocus::defocus_sim::DepthUnit,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "scene_units")]
    pub gt_unit: minifocus::defocus_sim::DepthUnit,
    /// AiF used to restrict scoring to textured pixels away from depth edges.
    #[arg(long)]
    pub mask_aif: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub margin: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub threshold: f64,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PipelineMethod {
    Classical,
    Refine,
}

#[derive(Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "classical")]
    pub method: PipelineMethod,
    #[command(flatten)]
    pub augment: AugmentFlags,
    #[command(flatten)]
    pub depth: DepthFlags,
    #[command(flatten)]
    pub refine: RefineFlags,
    #[command(flatten)]
    pub mask: MaskFlags,
    #[arg(long)]
    pub out: PathBuf,
}

/// How a command failed, which fixes the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Stage {
        stage: &'static str,
        source: minifocus::Error,
    },
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Stage { .. } => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "error[usage]: {msg}"),
            Failure::Stage { stage, source } => write!(f, "error[{stage}]: {source}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Augment(a) => commands::augment(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Depth(a) => commands::depth(&a),
        Command::Refine(a) => commands::refine(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Metrics(a) => commands::metrics(&a),
        Command::Pipeline(a) => commands::pipeline(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

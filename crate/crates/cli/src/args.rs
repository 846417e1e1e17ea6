use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "capa",
    version,
    about = "Toy LVLM decoder with contribution-aware pruning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded model weights and config.
    Gen(GenArgs),
    /// Write a seeded calibration set.
    GenCalib(GenCalibArgs),
    /// Per-layer FFN linearity profile over a calibration set.
    ProfileFfn(ProfileArgs),
    /// Threshold a profile into the set of approximated layers.
    SelectLayers(SelectArgs),
    /// Fit Hadamard scaling vectors for the selected layers.
    Calibrate(CalibrateArgs),
    /// Greedy generation under a plan.
    Run(RunArgs),
    /// Analytical cost report.
    Flops(FlopsArgs),
    /// Per-step Hellinger divergence of pruning policies from vanilla.
    Diverge(DivergeArgs),
    /// Sink value and class of every visual token.
    SinkReport(SinkArgs),
    /// Mean contribution per layer and key modality during generation.
    ContributionTrace(TraceArgs),
    /// Profile, select, calibrate and run from a manifest.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 256)]
    pub max_seq: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenCalibArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "calib-samples", alias = "n", default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 48)]
    pub n_img: usize,
    #[arg(long, default_value_t = 16)]
    pub n_txt: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Directory holding config.txt and weights.capt.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    Visual,
    Text,
    Joint,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long, default_value_t = 0.96)]
    pub eta: f64,
    #[arg(long, default_value = "first:2,last:1")]
    pub protect: String,
    #[arg(long, value_enum, default_value_t = Basis::Visual)]
    pub basis: Basis,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Visual,
    All,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub selection: PathBuf,
    #[arg(long, value_enum, default_value_t = Scope::Visual)]
    pub scope: Scope,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vanilla,
    Capa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Contribution,
    Attention,
    Uniform,
}

/// Pruning and FFN approximation flags shared by several commands.
#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[arg(long, value_enum, default_value_t = Policy::Contribution)]
    pub policy: Policy,
    /// Fraction of visual tokens kept; omit to disable pruning.
    #[arg(long)]
    pub keep_ratio: Option<f32>,
    #[arg(long, default_value_t = 2)]
    pub prune_layer: usize,
    /// Alpha file; its layers run in hadamard mode.
    #[arg(long)]
    pub alphas: Option<PathBuf>,
    /// Comma-separated layers run in skip mode.
    #[arg(long, value_delimiter = ',')]
    pub skip_layers: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Scope::Visual)]
    pub scope: Scope,
}

#[derive(Debug, Clone, Args)]
pub struct PromptArgs {
    #[arg(long, default_value_t = 0)]
    pub prompt_seed: u64,
    #[arg(long, default_value_t = 48)]
    pub n_img: usize,
    #[arg(long, default_value_t = 16)]
    pub n_txt: usize,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Capa)]
    pub mode: Mode,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PaperConfig {
    Llava7b,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ApproxMode {
    Hadamard,
    Skip,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(
        long,
        conflicts_with = "paper_config",
        required_unless_present = "paper_config"
    )]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub paper_config: Option<PaperConfig>,
    #[arg(long)]
    pub n_img: Option<usize>,
    #[arg(long)]
    pub n_txt: Option<usize>,
    #[arg(long)]
    pub keep_ratio: Option<f32>,
    #[arg(long, default_value_t = 2)]
    pub prune_layer: usize,
    /// Layer list such as `2-5,22-29`.
    #[arg(long, default_value = "")]
    pub approx_layers: String,
    #[arg(long, value_enum, default_value_t = ApproxMode::Hadamard)]
    pub approx_mode: ApproxMode,
    #[arg(long, value_enum, default_value_t = Scope::Visual)]
    pub scope: Scope,
    /// Output directory for cost.csv and cost_summary.txt.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DivergeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "contribution,attention"
    )]
    pub policies: Vec<Policy>,
    #[arg(long, default_value_t = 0.25)]
    pub keep_ratio: f32,
    #[arg(long, default_value_t = 2)]
    pub prune_layer: usize,
    #[arg(long)]
    pub alphas: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Scope::Visual)]
    pub scope: Scope,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SinkArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Report a single layer instead of all of them.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = capa_core::sinks::DEFAULT_TAU)]
    pub tau: f64,
    /// `median` or a positive number.
    #[arg(long, default_value = "median")]
    pub c_split: String,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

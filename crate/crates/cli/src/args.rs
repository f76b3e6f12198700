use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "topomap", version, about = "Topographic filter maps for 1D conv classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled spectrogram corpus.
    Synth(SynthArgs),
    /// Train a model, optionally sweeping the penalty weight.
    Train(TrainArgs),
    /// Print held-out metrics and neighbor statistics as JSON.
    Eval(EvalArgs),
    /// Compute group activation profiles of one layer.
    Nap(NapArgs),
    /// Render one group's time-averaged profile as a PPM image.
    Render(RenderArgs),
    /// Print the most responsive 3x3 region of a group as JSON.
    Region(RegionArgs),
    /// Synthesize optimal inputs for filters or a responsive region.
    Dream(DreamArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub freq: usize,
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignArg {
    Similarity,
    LiteralCosine,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleArg {
    Largest,
    Smallest,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationArg {
    Relu,
    ClampedRelu,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Comma-separated `ROWSxCOLS` per conv layer.
    #[arg(long, default_value = "8x8,8x8")]
    pub grid: String,
    #[arg(long, default_value_t = 5)]
    pub kernel: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train the λ = 0 control and candidate λ values, keep λ*.
    #[arg(long)]
    pub lambda_sweep: bool,
    #[arg(long, value_enum, default_value_t = RuleArg::Largest)]
    pub sweep_rule: RuleArg,
    #[arg(long, value_enum, default_value_t = SignArg::Similarity)]
    pub penalty_sign: SignArg,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Nap,
    Gradnap,
}

#[derive(Args, Debug, Serialize)]
pub struct NapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Nap)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// `sample_index,group_name` CSV; defaults to class labels.
    #[arg(long)]
    pub groups: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub nap: PathBuf,
    #[arg(long)]
    pub group: String,
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
    /// Apply 3x3 average smoothing before rendering.
    #[arg(long)]
    pub smooth: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    pub cell_px: u32,
}

#[derive(Args, Debug, Serialize)]
pub struct RegionArgs {
    #[arg(long)]
    pub nap: PathBuf,
    #[arg(long)]
    pub group: String,
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct DreamArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
    /// Profile directory whose most responsive region is dreamed.
    #[arg(long, requires = "group", conflicts_with = "filter")]
    pub region_from_nap: Option<PathBuf>,
    #[arg(long)]
    pub group: Option<String>,
    /// Dream a single filter instead of a region.
    #[arg(long, required_unless_present = "region_from_nap")]
    pub filter: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Input length; taken from the profile when dreaming a region.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub step_size: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub l2_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    pub blur_sigma: f64,
    #[arg(long, default_value_t = 4)]
    pub blur_every: usize,
    #[arg(long, default_value_t = 0.01)]
    pub init_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleArg {
    Tiny,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ScaleArg::Tiny)]
    pub scale: ScaleArg,
}

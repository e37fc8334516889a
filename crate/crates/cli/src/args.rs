use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pisa", version, about = "Inference for post-hoc identified subgroup average treatment effects")]
pub struct Cli {
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Output path: a directory for `simulate`, a file for `analyze` and `curve` (stdout when omitted).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coverage study on the simulation settings.
    Simulate(SimulateArgs),
    /// Subgroup inference on a dataset at one threshold.
    Analyze(AnalyzeArgs),
    /// Pointwise intervals over a grid of thresholds, as long-format CSV.
    Curve(CurveArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Comma-separated settings among A, B, C, D.
    #[arg(long, default_value = "A,B,C,D")]
    pub setting: String,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Perturbation draws.
    #[arg(long = "M", default_value_t = 2000)]
    pub draws: usize,
    /// Comma-separated perturbation subset sizes: n, n/2, n/4, n/8, an integer, or adaptive.
    #[arg(long, default_value = "n,n/2,n/4,n/8,adaptive")]
    pub m: String,
    /// Comma-separated methods among naive, sample-split, oracle, perturbation.
    #[arg(long, default_value = "naive,sample-split,oracle,perturbation")]
    pub methods: String,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub c: f64,
    /// Monte Carlo draws for the true PISA.
    #[arg(long, default_value_t = 1_000_000)]
    pub n_mc: usize,
    /// Threshold the true effect instead of the fitted one.
    #[arg(long)]
    pub predefined: bool,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0.01)]
    pub clip_eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CateKind {
    Linear,
    Spline,
    Tree,
    Localpoly,
    TLearner,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutcomeKind {
    Linear,
    Spline,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// CSV with columns y, g, z1..zp.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = CateKind::Spline)]
    pub cate: CateKind,
    /// CSV `id,dhat` of externally estimated effects (with `--cate external`).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Perturbation subset size: n, n/2, n/4, n/8, an integer, or adaptive.
    #[arg(long, default_value = "adaptive")]
    pub m: String,
    #[arg(long = "M", default_value_t = 2000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Comma-separated methods among perturbation, naive, sample-split.
    #[arg(long, default_value = "perturbation,naive")]
    pub methods: String,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0.01)]
    pub clip_eps: f64,
    /// Outcome model for the nuisance fits.
    #[arg(long, value_enum, default_value_t = OutcomeKind::Spline)]
    pub outcome: OutcomeKind,
    #[arg(long, default_value_t = 4)]
    pub knots: usize,
    #[arg(long, default_value_t = 20)]
    pub min_leaf: usize,
    #[arg(long, default_value_t = 4)]
    pub max_depth: usize,
    /// Nearest-neighbour span of the local polynomial CATE model.
    #[arg(long, default_value_t = 0.75)]
    pub span: f64,
    /// Half-width of the band around c reported by the boundary diagnostic.
    #[arg(long, default_value_t = 0.05)]
    pub boundary_bandwidth: f64,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub c: f64,
    /// Also write the in-sample estimated effects as `id,dhat` (readable by `--predictions`).
    #[arg(long)]
    pub write_predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Threshold grid `start:stop:step`.
    #[arg(long, allow_hyphen_values = true)]
    pub c_grid: String,
}

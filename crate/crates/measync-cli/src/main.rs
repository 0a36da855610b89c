//! measync command line: synthesize relative-rotation graphs, recover
//! absolute rotation measures, score results against ground truth, and sweep
//! parameter grids into plot-ready CSV.

mod error;
mod eval;
mod files;
mod sweep;
mod synth;
mod sync_cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use measync::{
    random_coupling, AbsoluteBelief, CouplingMode, GroundCost, JointCoupling, LossKind, StepRule,
    SyncConfig, UnitQuaternion,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use error::CliError;

#[derive(Parser)]
#[command(
    name = "measync",
    version,
    about = "Synchronizes probability measures over 3D rotations on a camera graph"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic relative-rotation graph plus its ground truth
    Synth(SynthArgs),
    /// Recover absolute rotation measures from a graph file
    Sync(SyncArgs),
    /// Score a result file against a truth file
    Eval(EvalArgs),
    /// Grid of synth + sync + eval cells over one axis, all four variants
    Sweep(SweepArgs),
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    He,
    Le,
}

impl ModeArg {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeArg::He => "he",
            ModeArg::Le => "le",
        }
    }
}

impl From<ModeArg> for CouplingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::He => CouplingMode::HighEntropy,
            ModeArg::Le => CouplingMode::LowEntropy,
        }
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Sinkhorn,
    Mmd,
}

impl LossArg {
    pub fn as_str(self) -> &'static str {
        match self {
            LossArg::Sinkhorn => "sinkhorn",
            LossArg::Mmd => "mmd",
        }
    }
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Sinkhorn => LossKind::Sinkhorn,
            LossArg::Mmd => LossKind::Mmd,
        }
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum CostArg {
    Euc,
    Geo,
}

impl CostArg {
    pub fn as_str(self) -> &'static str {
        match self {
            CostArg::Euc => "euc",
            CostArg::Geo => "geo",
        }
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum StepArg {
    Const,
    Invw,
}

impl StepArg {
    pub fn as_str(self) -> &'static str {
        match self {
            StepArg::Const => "const",
            StepArg::Invw => "invw",
        }
    }
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Noise,
    Sparsity,
    Particles,
    Iters,
}

impl AxisArg {
    pub fn as_str(self) -> &'static str {
        match self {
            AxisArg::Noise => "noise",
            AxisArg::Sparsity => "sparsity",
            AxisArg::Particles => "particles",
            AxisArg::Iters => "iters",
        }
    }
}

#[derive(Args)]
pub struct SynthArgs {
    /// Number of cameras
    #[arg(long)]
    pub n: usize,
    /// Ground-truth particles per camera
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Coupling mode of the pushed-forward relative measures
    #[arg(long, value_enum, default_value_t = ModeArg::He)]
    pub mode: ModeArg,
    /// Tangent-space noise scale in radians
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Fraction of complete-graph edges to keep, in (0, 1]
    #[arg(long, default_value_t = 1.0)]
    pub completeness: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving graph.json and truth.json
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct SyncArgs {
    /// Graph file to synchronize
    #[arg(long, value_name = "PATH")]
    pub graph: PathBuf,
    #[arg(long, value_enum, default_value_t = LossArg::Sinkhorn)]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value_t = CostArg::Geo)]
    pub cost: CostArg,
    /// Geodesic cost exponent, in [1, 2]
    #[arg(long, default_value_t = 1.2)]
    pub p: f64,
    /// Entropic regularization of the Sinkhorn loss
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Mass regularizer weight for unconstrained runs
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Particle step size
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Weight-parameter step size
    #[arg(long, default_value_t = 0.001)]
    pub lr_beta: f64,
    #[arg(long, value_enum, default_value_t = StepArg::Const)]
    pub step_rule: StepArg,
    #[arg(long, value_enum, default_value_t = ModeArg::He)]
    pub mode: ModeArg,
    /// Keep weights on the probability simplex (β on the unit sphere)
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set, value_name = "BOOL")]
    pub constrained: bool,
    /// Estimated particles per camera
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Truth-shaped result file whose camera 0 pins the gauge
    #[arg(long, value_name = "PATH")]
    pub gauge: Option<PathBuf>,
    /// Directory receiving result.json and trace.csv
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Record the loss every this many iterations
    #[arg(long, default_value_t = 10)]
    pub trace_stride: usize,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Result file to score
    #[arg(long, value_name = "PATH")]
    pub result: PathBuf,
    /// Ground-truth result file to score against
    #[arg(long, value_name = "PATH")]
    pub truth: PathBuf,
    /// Entropic regularization of the Sinkhorn error metric
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = CostArg::Geo)]
    pub cost: CostArg,
    #[arg(long, default_value_t = 1.2)]
    pub p: f64,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Which knob the axis values drive
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    /// Comma-separated axis values
    #[arg(long, value_name = "LIST")]
    pub values: String,
    /// Repeats per axis value, each with its own seed offset
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Cameras per synthetic instance
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Ground-truth particles per camera
    #[arg(long, default_value_t = 3)]
    pub truth_k: usize,
    /// Baseline noise, overridden on the noise axis
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Baseline completeness, overridden on the sparsity axis
    #[arg(long, default_value_t = 1.0)]
    pub completeness: f64,
    /// Geodesic cost exponent for geo variants and the error metric
    #[arg(long, default_value_t = 1.2)]
    pub p: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lr_beta: f64,
    #[arg(long, value_enum, default_value_t = StepArg::Const)]
    pub step_rule: StepArg,
    #[arg(long, value_enum, default_value_t = ModeArg::He)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set, value_name = "BOOL")]
    pub constrained: bool,
    /// Estimated particles per camera, overridden on the particles axis
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Iteration budget, overridden on the iters axis
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub trace_stride: usize,
    /// Ground cost of the sinkhorn_error metric (losses come from variants)
    #[arg(long, value_enum, default_value_t = CostArg::Geo)]
    pub cost: CostArg,
    /// Directory receiving sweep.csv
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

/// Resolves the cost flags into a ground cost, rejecting out-of-range
/// exponents as a usage error.
pub fn cost_from(cost: CostArg, p: f64) -> Result<GroundCost, CliError> {
    match cost {
        CostArg::Euc => Ok(GroundCost::SquaredEuclidean),
        CostArg::Geo => GroundCost::geodesic(p).map_err(|e| CliError::Usage(e.to_string())),
    }
}

pub fn step_rule_from(rule: StepArg, lr: f64) -> StepRule {
    match rule {
        StepArg::Const => StepRule::Constant,
        StepArg::Invw => StepRule::InverseWeight { eta_q0: lr },
    }
}

/// Seeded starting coupling matching the optimizer's own default draw, with
/// camera 0 replaced by the gauge reference when one is supplied. Without a
/// gauge, single-particle runs anchor camera 0 at the identity; multi
/// particle runs keep the random draw, which only fixes the gauge up to the
/// invariance class.
pub fn build_init(
    n_cameras: usize,
    config: &SyncConfig,
    gauge: Option<AbsoluteBelief>,
) -> Result<JointCoupling, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let drawn = random_coupling(n_cameras, config.particles, config.mode, &mut rng)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut beliefs = drawn.beliefs().to_vec();
    match gauge {
        Some(mut g) => {
            g.camera_id = 0;
            beliefs[0] = g;
        }
        None => {
            if config.particles == 1 {
                beliefs[0] = AbsoluteBelief::uniform(0, vec![UnitQuaternion::identity()])
                    .expect("one particle");
            }
        }
    }
    JointCoupling::with_mode(config.mode, beliefs).map_err(|e| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => synth::run(&args),
        Command::Sync(args) => sync_cmd::run(&args),
        Command::Eval(args) => eval::run(&args),
        Command::Sweep(args) => sweep::run(&args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.code())
        }
    }
}

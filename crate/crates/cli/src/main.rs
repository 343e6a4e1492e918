//! `radpose`: generate toy datasets, train fields, recover camera poses and
//! run pose-recovery benchmarks.

mod commands;
mod error;
mod run;
mod scene;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radiance_pose::estimator::LossMode;
use radiance_pose::Strategy;

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "radpose", version, about = "Camera pose recovery by inverting radiance fields")]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a scene from a hemisphere of views into a NeRF-synthetic style dataset.
    Generate(GenerateArgs),
    /// Fit an MLP radiance field to a posed dataset.
    Train(TrainArgs),
    /// Recover the pose of one image.
    Estimate(EstimateArgs),
    /// Perturb known poses and measure how often they are recovered.
    Benchmark(BenchmarkArgs),
    /// Train on labeled views, pose the unlabeled ones, retrain on both.
    Selfsup(SelfsupArgs),
    /// Render a single view.
    Render(RenderArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON settings file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory receiving every artifact and `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SceneArgs {
    /// `toy` or a scene spec JSON file.
    #[arg(long)]
    pub scene: Option<String>,
    /// Trained field (`NRF1` file); the camera comes from `--data`.
    #[arg(long)]
    pub field: Option<PathBuf>,
    /// Dataset directory holding `transforms.json`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Image side length for the toy scene.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    /// Camera distance from the origin.
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_rays: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct EstimatorFlags {
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `random`, `interest_point` or `interest_region`.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossMode>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dilation: Option<usize>,
}

fn parse_loss(s: &str) -> Result<LossMode, String> {
    match s {
        "rgb" => Ok(LossMode::Rgb),
        "yuv_uv" | "yuv" => Ok(LossMode::YuvUv),
        _ => Err(format!("unknown loss '{s}' (expected rgb or yuv_uv)")),
    }
}

#[derive(Args, Debug, Clone)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub estimator: EstimatorFlags,
    /// Observed image (PNG).
    #[arg(long)]
    pub image: PathBuf,
    /// Initial camera-to-world pose, a 4×4 row-major JSON matrix.
    #[arg(long)]
    pub init_pose: PathBuf,
    /// Ground-truth pose; adds error columns to the trajectory.
    #[arg(long)]
    pub truth_pose: Option<PathBuf>,
    /// Render the current estimate every this many steps.
    #[arg(long)]
    pub render_every: Option<usize>,
    /// Save the sampling mask (region strategy only).
    #[arg(long)]
    pub save_mask: bool,
}

#[derive(Args, Debug, Clone)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub estimator: EstimatorFlags,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Ground-truth views on the hemisphere.
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub rot_limit: Option<f64>,
    #[arg(long)]
    pub trans_limit: Option<f64>,
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct SelfsupArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub estimator: EstimatorFlags,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated frame indices with known poses.
    #[arg(long, value_delimiter = ',')]
    pub labeled: Option<Vec<usize>>,
    /// Comma-separated frame indices whose poses are estimated.
    #[arg(long, value_delimiter = ',')]
    pub unlabeled: Option<Vec<usize>>,
    /// Comma-separated held-out frame indices for PSNR.
    #[arg(long, value_delimiter = ',')]
    pub eval: Option<Vec<usize>>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_rays: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Camera-to-world pose, a 4×4 row-major JSON matrix.
    #[arg(long)]
    pub pose: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = match cli.threads {
        Some(0) => return Err(CliError::Invalid("--threads must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(CliError::other)?;
    match cli.command {
        Command::Generate(a) => commands::generate(&a, threads),
        Command::Train(a) => commands::train(&a, threads),
        Command::Estimate(a) => commands::estimate(&a, threads),
        Command::Benchmark(a) => commands::benchmark(&a, threads),
        Command::Selfsup(a) => commands::selfsup(&a, threads),
        Command::Render(a) => commands::render(&a, threads),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

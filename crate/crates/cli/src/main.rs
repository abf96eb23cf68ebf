//! `cryodiff`: simulate, train, denoise, evaluate, reconstruct and plot.

mod commands;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cryodiff::simulate::Split;

use run::CliError;

#[derive(Parser)]
#[command(
    name = "cryodiff",
    version,
    about = "Two-stage diffusion denoising of cryo-EM particle images"
)]
struct Cli {
    /// Run single-threaded; artifacts are byte-identical across reruns.
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-blob density map.
    Phantom(PhantomArgs),
    /// Project a map into a paired noisy/clean dataset.
    Simulate(SimulateArgs),
    /// Train the diffusion model or the refinement network.
    Train(TrainArgs),
    /// Denoise a stack with trained checkpoints.
    Denoise(DenoiseArgs),
    /// Denoise a stack with a classical filter.
    Baseline(BaselineArgs),
    /// Denoise a stack with an external program `<exe> <in.mrc> <out.mrc>`.
    Adapter(AdapterArgs),
    /// Score a denoised stack against clean references.
    Eval(EvalArgs),
    /// Reconstruct a volume from a stack with known poses.
    Recon(ReconArgs),
    /// Fourier shell correlation between two volumes.
    Fsc(FscArgs),
    /// Render FSC and loss curves from CSV files.
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub side: usize,
    #[arg(long, default_value_t = 2.0)]
    pub voxel_size: f64,
    #[arg(long, default_value_t = 12)]
    pub blobs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// JSON: `{"map": path, "simulation": {n_images, snr, image_size, rng_seed, split}}`.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Stage {
    Diffusion,
    Post,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub stage: Stage,
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Diffusion checkpoint; required for the post stage.
    #[arg(long)]
    pub diffusion: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where a stack comes from: an MRC file, or one split of a dataset.
#[derive(Args)]
pub struct StackSource {
    /// MRC stack.
    #[arg(long, conflicts_with = "dataset")]
    pub input: Option<PathBuf>,
    /// Dataset directory; its noisy images of `--split` are used.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Args)]
pub struct DenoiseArgs {
    #[command(flatten)]
    pub source: StackSource,
    #[arg(long)]
    pub diffusion: PathBuf,
    /// Refinement checkpoint; without it only the diffusion stage runs.
    #[arg(long)]
    pub post: Option<PathBuf>,
    /// Inference steps (defaults to the training schedule length).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add noise along the reverse chain instead of the deterministic chain.
    #[arg(long)]
    pub stochastic: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FilterKind {
    Lowpass,
    Wiener,
}

#[derive(Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub source: StackSource,
    #[arg(long, value_enum)]
    pub method: FilterKind,
    /// Gaussian sigma in pixels (lowpass) or noise variance (wiener).
    #[arg(long)]
    pub param: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AdapterArgs {
    #[command(flatten)]
    pub source: StackSource,
    #[arg(long)]
    pub exe: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub denoised: PathBuf,
    /// Clean MRC stack.
    #[arg(long, conflicts_with = "dataset")]
    pub clean: Option<PathBuf>,
    /// Dataset directory; its clean images of `--split` are used.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = "denoised")]
    pub method: String,
    #[arg(long, default_value = "dataset")]
    pub dataset_name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReconArgs {
    /// Stack aligned with the images of `--split` in `--dataset`.
    #[arg(long)]
    pub stack: PathBuf,
    /// Dataset directory holding the pose manifest.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = cryodiff::recon::DEFAULT_WEIGHT_FLOOR)]
    pub weight_floor: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FscArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = cryodiff::metrics::FSC_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PlotArgs {
    /// FSC curve CSV, optionally `path=label`; repeatable.
    #[arg(long)]
    pub fsc: Vec<String>,
    /// Loss history CSV, optionally `path=label`; repeatable.
    #[arg(long)]
    pub loss: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if cli.serial {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure serial mode: {e}")))?;
    }
    match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Train(a) => commands::train(a),
        Command::Denoise(a) => commands::denoise(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Adapter(a) => commands::adapter(a),
        Command::Eval(a) => commands::eval(a),
        Command::Recon(a) => commands::recon(a),
        Command::Fsc(a) => commands::fsc(a),
        Command::Plot(a) => plot::plot(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `dfkflow`: scene generation, reconstruction, re-simulation, metrics and
//! velocity visualization.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure.

mod commands;
mod config;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dfkflow", version, about = "Divergence-free kernel flow reconstruction from multi-view smoke renders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene bundle.
    Generate(GenerateArgs),
    /// Recover a time-varying velocity field from a scene's observations.
    Reconstruct(ReconstructArgs),
    /// Advect the frame-0 cloud with a field alone and score the renders.
    Resim(ResimArgs),
    /// Divergence and masked velocity errors against the scene's ground truth.
    Metrics(MetricsArgs),
    /// Write mid-plane velocity slices as a PPM image.
    RenderVelocity(RenderVelocityArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with flat dotted keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// plume, abc or taylor-green.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub gaussians: Option<usize>,
    /// Lattice resolution per axis of the plume field.
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub eval_resolution: Option<usize>,
    /// Largest displacement per frame, in domain heights.
    #[arg(long)]
    pub max_speed: Option<f64>,
    #[arg(long)]
    pub frame_dt: Option<f64>,
    /// Primitives injected per frame at the plume source.
    #[arg(long)]
    pub inflow: Option<usize>,
    /// ABC coefficient A, or the Taylor-Green amplitude.
    #[arg(long, allow_negative_numbers = true)]
    pub a: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub b: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub c: Option<f64>,
    #[arg(long)]
    pub frequency: Option<f64>,
    /// Comma-separated view axes of analytic scenes, e.g. "+Z,+X".
    #[arg(long)]
    pub cameras: Option<String>,
}

#[derive(Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with flat dotted keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue the run in this directory from its newest checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub window_size: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda_ssim: Option<f64>,
    #[arg(long)]
    pub lambda_aniso: Option<f64>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub lambda_vor: Option<f64>,
    #[arg(long)]
    pub substeps: Option<usize>,
    /// RK4, Midpoint or Euler.
    #[arg(long)]
    pub scheme: Option<String>,
    /// Kernel lattice resolution per axis.
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub warmup_iterations: Option<usize>,
    #[arg(long)]
    pub sliding_iterations: Option<usize>,
    #[arg(long)]
    pub frame0_iterations: Option<usize>,
    #[arg(long)]
    pub lr_weights_start: Option<f64>,
    #[arg(long)]
    pub lr_weights_end: Option<f64>,
    #[arg(long)]
    pub lr_attributes: Option<f64>,
    #[arg(long)]
    pub lr_positions: Option<f64>,
    #[arg(long)]
    pub velocity_scale: Option<f64>,
    #[arg(long)]
    pub collocation_samples: Option<usize>,
    #[arg(long)]
    pub fd_step_fraction: Option<f64>,
    /// Primitives created by the frame-0 initialization.
    #[arg(long)]
    pub gaussians: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct ResimArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Output directory of a reconstruction.
    #[arg(long, conflicts_with = "gt")]
    pub run: Option<PathBuf>,
    /// Use the scene's ground-truth field and cloud.
    #[arg(long)]
    pub gt: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// PSNR peak; defaults to the brightest reference pixel.
    #[arg(long)]
    pub peak: Option<f64>,
    /// Also write every render as PFM.
    #[arg(long)]
    pub frames: bool,
    /// Also write every render as 8-bit PGM scaled by the peak.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Directory of DFK frames (`fields.json` plus `field_NNN.dfk`).
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long)]
    pub gt: bool,
    #[arg(long)]
    pub zero: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Divergence finite-difference step as a fraction of the domain diagonal.
    #[arg(long, default_value_t = 1e-4)]
    pub fd_step_fraction: f64,
}

#[derive(Args)]
pub struct RenderVelocityArgs {
    /// A `.dfk` file or a directory of frames.
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Side of each slice in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn from_core(e: dfkflow::Error, flags: &[(&'static str, &'static str)]) -> Self {
        match e {
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e @ dfkflow::Error::Io { .. } => CliError::Io(e.to_string()),
            e => CliError::Validation(config::name_flag(e.to_string(), flags)),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<dfkflow::Error> for CliError {
    fn from(e: dfkflow::Error) -> Self {
        CliError::from_core(e, &[])
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => commands::cmd_generate(a),
        Command::Reconstruct(a) => commands::cmd_reconstruct(a),
        Command::Resim(a) => commands::cmd_resim(a),
        Command::Metrics(a) => commands::cmd_metrics(a),
        Command::RenderVelocity(a) => commands::cmd_render_velocity(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! `inrct`: simulate, train, reconstruct, run the FBP/FDK baseline, evaluate
//! and sweep ablations from one TOML run configuration.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use inrct::projector::ProjectionMode;
use inrct::Error;

/// Environment variable overriding the configured worker count.
pub const WORKERS_ENV: &str = "INRCT_WORKERS";

#[derive(Parser)]
#[command(name = "inrct", version, about = "INR reconstruction for truncated fan/cone-beam CT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Truncated,
    Extended,
    Dense,
}

impl From<Mode> for ProjectionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Truncated => ProjectionMode::Truncated,
            Mode::Extended => ProjectionMode::Extended,
            Mode::Dense => ProjectionMode::Dense,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Region {
    /// The scanner field of view `Ω`.
    Fov,
    /// The extended domain `Ω_E`.
    Extended,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the sinogram of the configured phantom.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        /// Output sinogram (default: <output_dir>/sinogram.sino).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train a field on the configured sinogram.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Override `train.mode`.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Start from a checkpoint instead of a fresh initialisation.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output checkpoint (default: <output_dir>/checkpoint.inr).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Sample a trained field on a voxel grid.
    Reconstruct {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "fov")]
        region: Region,
        /// Output volume (default: <output_dir>/inr.vol).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Also write the central slice as PNG next to the volume.
        #[arg(long)]
        png: bool,
    },
    /// Filtered backprojection (fan) or FDK (cone) baseline.
    Fdk {
        #[command(flatten)]
        config: ConfigArg,
        /// Extrapolate truncated detector rows first (overrides the config).
        #[arg(long)]
        extrapolate: bool,
        #[arg(long, value_enum, default_value = "fov")]
        region: Region,
        /// Output volume (default: <output_dir>/fdk.vol).
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        png: bool,
    },
    /// PSNR and SSIM of a reconstruction against a reference.
    Eval {
        /// Reconstructed volume.
        #[arg(long)]
        recon: PathBuf,
        /// Reference volume; without it the configured phantom is rasterized.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Run configuration supplying the phantom and evaluation settings.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Intensity range for PSNR/SSIM (default: reference max − min).
        #[arg(long)]
        data_range: Option<f64>,
        /// Write a difference image of the central slice.
        #[arg(long)]
        diff_png: Option<PathBuf>,
        /// Metrics CSV (default: next to the reconstruction).
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "recon")]
        label: String,
    },
    /// Train one field per `[[ablate.settings]]` entry from a shared seed.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out } => commands::simulate(&config.config, out),
        Command::Train { config, mode, resume, out } => commands::train(&config.config, mode.map(Into::into), resume, out),
        Command::Reconstruct { config, checkpoint, region, out, png } => {
            commands::reconstruct(&config.config, &checkpoint, matches!(region, Region::Extended), out, png)
        }
        Command::Fdk { config, extrapolate, region, out, png } => {
            commands::fdk(&config.config, extrapolate, matches!(region, Region::Extended), out, png)
        }
        Command::Eval { recon, reference, config, data_range, diff_png, out, label } => {
            commands::eval(commands::EvalArgs { recon, reference, config, data_range, diff_png, out, label })
        }
        Command::Ablate { config } => commands::ablate(&config.config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

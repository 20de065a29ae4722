//! `nmsa` command-line tool: style extraction, stylized generation, and the
//! ablation and probe sweeps, with PPM/PNG image I/O.

pub mod commands;
pub mod config;
pub mod imageio;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use nmsa_core::style::ControlMode;

use crate::imageio::ImageFormat;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "nmsa", version, about = "Training-free stylized latent generation")]
pub struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Capture style statistics from a style image into a `.nmsa` file.
    Extract(ExtractArgs),
    /// Generate a stylized image.
    Generate(GenerateArgs),
    /// Compare every attention control over a range of seeds (CSV).
    Ablate(AblateArgs),
    /// Sweep the style-extraction timestep (CSV).
    ProbeTimesteps(ProbeTimestepsArgs),
    /// Sweep the number of sampling steps (CSV).
    ProbeSteps(ProbeStepsArgs),
    /// Render the top three principal components of a layer's features.
    PcaViz(PcaVizArgs),
}

fn parse_lambda(s: &str) -> Result<f32, String> {
    let v: f32 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("lambda must lie in [0, 1], got {v}"))
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Style image (PPM or PNG).
    pub style: PathBuf,
    /// Extraction timestep; defaults to the config's `extract_t`.
    #[arg(short = 't', long = "timestep")]
    pub timestep: Option<usize>,
    #[arg(short, long, default_value = "stats.nmsa")]
    pub output: PathBuf,
    /// Prompt conditioning the capture pass; match the generation prompt.
    #[arg(short, long, default_value = "")]
    pub prompt: String,
    /// Seed of the extraction noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(short, long, default_value = "")]
    pub prompt: String,
    /// `.nmsa` statistics or a style image (extracted on the fly).
    #[arg(short, long)]
    pub style: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub control: Option<ControlMode>,
    #[arg(long, value_parser = parse_lambda)]
    pub lambda: Option<f32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inject only into these layers (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Re-extract style statistics at every sampling timestep (image styles
    /// only).
    #[arg(long)]
    pub per_step_style: bool,
    /// Output format; defaults to the file extension, then the config.
    #[arg(long)]
    pub format: Option<ImageFormat>,
    /// Nearest-neighbour enlargement of the written image.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(short, long, default_value = "")]
    pub prompt: String,
    /// Style image.
    #[arg(short, long)]
    pub style: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// First seed; seeds run from here upward.
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,
    #[arg(long, value_parser = parse_lambda)]
    pub lambda: Option<f32>,
    #[arg(short, long, default_value = "metrics.csv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeTimestepsArgs {
    #[arg(short, long, default_value = "")]
    pub prompt: String,
    /// Style image.
    #[arg(short, long)]
    pub style: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,100,200,300,400,500")]
    pub timesteps: Vec<usize>,
    #[arg(long)]
    pub control: Option<ControlMode>,
    #[arg(short, long, default_value = "probe_timesteps.csv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeStepsArgs {
    #[arg(short, long, default_value = "")]
    pub prompt: String,
    /// Style image.
    #[arg(short, long)]
    pub style: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8")]
    pub step_counts: Vec<usize>,
    #[arg(long)]
    pub control: Option<ControlMode>,
    #[arg(short, long, default_value = "probe_steps.csv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct PcaVizArgs {
    #[arg(short, long, default_value = "")]
    pub prompt: String,
    /// `.nmsa` statistics or a style image.
    #[arg(short, long)]
    pub style: Option<PathBuf>,
    #[arg(long)]
    pub control: Option<ControlMode>,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub format: Option<ImageFormat>,
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Parse `args` (program name first), run, and return the exit code:
/// 0 success, 1 usage error, 2 runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match commands::execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

//! `wavedeblur` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime or numeric failure, 2 on usage
//! or format errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "wavedeblur", version, about = "Learnable wavelet transforms and a coarse-to-fine deblurring network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward 2D wavelet transform of an image or tensor file.
    Dwt(DwtArgs),
    /// Inverse 2D wavelet transform of a subband tensor.
    Idwt(IdwtArgs),
    /// Learns a perfect-reconstruction filter bank from a random start.
    LearnFilters(LearnArgs),
    /// Trains the deblurring network on synthetic data.
    Train(TrainArgs),
    /// Restores blurred images with a checkpoint and scores them.
    Eval(EvalArgs),
    /// Counts multiply-accumulates of the network.
    Macs(MacsArgs),
    /// Runs the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DwtArgs {
    /// Input image (.pgm/.ppm) or tensor file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// `haar`, `db2` or a filter bank file.
    #[arg(long, default_value = "haar")]
    pub bank: String,
    /// Output tensor file.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for min-max normalized grayscale images of every subband.
    #[arg(long)]
    pub subband_images: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct IdwtArgs {
    /// Input subband tensor file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// `haar`, `db2` or a filter bank file.
    #[arg(long, default_value = "haar")]
    pub bank: String,
    /// Output image (.pgm/.ppm) or tensor file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    /// Filter length (even).
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    /// Peak learning rate of the cosine schedule.
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Output filter bank file.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve file; defaults to the bank path with `.loss.csv` appended.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (`key=value` lines); defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `key=value` from the config; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Suppresses per-row progress output.
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Blurred image, or a directory of them.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Sharp reference image, or a directory with matching file names.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Where to write the restored image (or directory of images).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also writes the scores as `image,psnr,ssim` rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Train,
    Inference,
}

#[derive(Debug, Args)]
pub struct MacsArgs {
    /// Training or network config; defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Train)]
    pub mode: ModeArg,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Ops,
    Wavelet,
    Network,
    All,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = TargetArg::All)]
    pub target: TargetArg,
    #[command(flatten)]
    pub seed: SeedArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

//! `massact`: generate trajectories, disrupt channels, extract masks and
//! transport activations from the command line.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_IO: u8 = 4;

/// A failure reported as one stderr line and an exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        Self {
            code: EXIT_CONFIG,
            kind: "config",
            message,
        }
    }

    pub fn io(message: String) -> Self {
        Self {
            code: EXIT_IO,
            kind: "io",
            message,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "massact: error[{}]: {}", self.kind, self.message)
    }
}

impl From<massact::Error> for CliError {
    fn from(e: massact::Error) -> Self {
        use massact::Error as E;
        let (code, kind) = match &e {
            E::Config(_) | E::Range(_) | E::InvalidArgument(_) => (EXIT_CONFIG, "config"),
            E::Io { .. } => (EXIT_IO, "io"),
            E::Crc { .. } | E::Version(_) | E::Format(_) => (EXIT_IO, "format"),
            _ => (EXIT_RUNTIME, "runtime"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "massact", version, about = "Massive-activation analysis on a miniature dual-stream transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `engine.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Named preset applied beneath the config.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a trajectory and dump its latents and activations.
    Generate(RunArgs),
    /// Zero selected channels and compare against the baseline.
    Disrupt(RunArgs),
    /// Extract foreground masks from massive-activation channels.
    Segment(RunArgs),
    /// Merge source activations into a target run.
    Transport(RunArgs),
    /// Score a predicted mask against a ground-truth mask.
    EvalMask {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Chebyshev radius of the boundary band.
        #[arg(long, default_value_t = massact::spatial::DEFAULT_BAND_RADIUS)]
        band: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => commands::generate(&commands::Context::load(a)?),
        Command::Disrupt(a) => commands::disrupt(&commands::Context::load(a)?),
        Command::Segment(a) => commands::segment(&commands::Context::load(a)?),
        Command::Transport(a) => commands::transport(&commands::Context::load(a)?),
        Command::EvalMask { mask, gt, band, out } => commands::eval_mask(&mask, &gt, band, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code)
        }
    }
}

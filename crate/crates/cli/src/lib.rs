//! Library side of the `voxatn` command-line tool.

pub mod commands;
pub mod config;
pub mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Error carrying the exit status it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, arguments or input data (exit 1).
    #[error("{0}")]
    User(String),
    /// A violated internal invariant (exit 2).
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<voxatn::Error> for CliError {
    fn from(e: voxatn::Error) -> Self {
        use voxatn::Error as E;
        match e {
            E::Parse { .. }
            | E::ZeroExtent
            | E::EmptyCloud
            | E::EmptyGrid { .. }
            | E::InvalidConfig(_)
            | E::SingleClass
            | E::InsufficientIdentities { .. }
            | E::EmptyClass(_)
            | E::InvalidScores(_)
            | E::Checkpoint(_)
            | E::GridFormat(_)
            | E::Io(_) => CliError::User(e.to_string()),
            E::Shape(_)
            | E::NonFinite(_)
            | E::NotNormalized(_)
            | E::MissingCache
            | E::LengthMismatch { .. }
            | E::Diverged(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::User(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "voxatn", version, about = "Face presentation-attack detection on 3D point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the model input resolution.
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    /// Run single-threaded so every artifact is reproducible byte for byte.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset (PLY files and manifest.csv).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the protocol's training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score the protocol's test split with a trained checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every filter variant with and without attention.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Finite-difference gradient checks for every layer and the whole network.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale one op's backward pass to confirm failures are detected.
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Plot one or more DET CSV files as an SVG.
    DetPlot {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Output SVG path (defaults to <out>/det.svg).
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

/// Parses `args` and runs the command, reporting errors on stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

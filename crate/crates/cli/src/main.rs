//! `patchattack`: train, evaluate and apply adversarial patches.

mod apply;
mod chart;
mod evaluate;
mod fixture;
mod inputs;
mod manifest;
mod settings;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "patchattack", version, about = "Universal adversarial patches against object detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize a patch against one white-box detector.
    Train(train::TrainArgs),
    /// Score patches on a set of detectors and write a transfer report.
    Evaluate(evaluate::EvaluateArgs),
    /// Paste a patch onto images and compare detections before and after.
    Apply(apply::ApplyArgs),
    /// Write synthetic images and fitted toy detector weights for a demo run.
    Fixture(fixture::FixtureArgs),
}

/// Flags every command accepts.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML settings file; command-line flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Extra `KEY=VALUE` setting; repeatable. Dotted keys reach nested tables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit code 2).
    Usage(String),
    /// Anything that went wrong while doing the work (exit code 1).
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: String) -> Self {
        Self::Usage(msg)
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<patchattack::Error> for CliError {
    fn from(e: patchattack::Error) -> Self {
        match e {
            patchattack::Error::Config(_) => Self::Usage(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Apply(a) => apply::run(a),
        Command::Fixture(a) => fixture::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! Command-line front end for polite-teacher.
//!
//! Six verbs cover the whole workflow: `gen-data` writes a synthetic corpus,
//! `split` draws the labelled subset, `train` runs burn-in and mutual
//! training, `eval` scores a checkpoint, `sweep` repeats mutual training over
//! a grid of one threshold, and `plot` turns logs and sweep tables into
//! figures. Exit status is 0 on success, 1 for usage errors and 2 for
//! failures at run time.

use std::ffi::OsString;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

pub mod args;
pub mod commands;
pub mod corpus;
pub mod plot;
pub mod sweep;

pub use args::{fresh_dir, output_root, ConfigArgs, RUNDIR_ENV};
pub use commands::{GenDataArgs, EvalArgs, RunSummary, SplitArgs, StageArg, StageSummary, TrainArgs};
pub use plot::PlotArgs;
pub use sweep::{SweepArgs, SweepParam, SweepRow};

/// Failure of a command, split by who has to act on it.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, flag combinations or configuration values.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl From<polite_teacher::Error> for CliError {
    fn from(e: polite_teacher::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "polite-teacher", version, about = "Semi-supervised instance segmentation with a polite teacher")]
pub struct Cli {
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic shapes corpus as images plus COCO-style annotations.
    GenData(GenDataArgs),
    /// Draw the labelled/unlabelled partition of a training set.
    Split(SplitArgs),
    /// Burn-in and mutual training into a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on an annotated dataset.
    Eval(EvalArgs),
    /// One mutual-training run per value of a threshold or loss weight.
    Sweep(SweepArgs),
    /// Curves from eval.jsonl logs or sweep tables.
    Plot(PlotArgs),
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a).map(drop),
        Command::Split(a) => commands::split(&a).map(drop),
        Command::Train(a) => commands::train(&a).map(drop),
        Command::Eval(a) => commands::eval(&a).map(drop),
        Command::Sweep(a) => sweep::sweep(&a).map(drop),
        Command::Plot(a) => plot::plot(&a).map(drop),
    }
}

/// Parses `args` (program name first) and runs the command. Parse failures,
/// `--help` included, come back as usage errors.
pub fn run_args<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::usage(e.to_string()))?;
    run(cli)
}

/// Entry point of the binary.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("usage error: {m}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}

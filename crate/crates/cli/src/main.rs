//! Experiment harness around the recurrent-depth loop diagnostics: one
//! config file drives training, evaluation, geometry collection,
//! threshold sweeps, and the closed-form self-check.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "loopscope",
    version,
    about = "Loop-geometry diagnostics and adaptive-exit experiments for recurrent-depth models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from [model]/[recurrence]/[train], or resume a checkpoint.
    Train(RunArgs),
    /// CE/PPL of one checkpoint at a fixed budget or under an exit policy.
    Eval(RunArgs),
    /// Collect iterate records, aggregate curves, and 2-D projections.
    Diagnose(RunArgs),
    /// Exit policies x thresholds against a fixed-budget reference.
    Sweep(RunArgs),
    /// Check simulations against closed forms and predicted exit steps.
    Oracle(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML, version = 1).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override applied before the run, e.g. --set train.steps=100.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.cmd {
        Cmd::Train(a) => ("train", a),
        Cmd::Eval(a) => ("eval", a),
        Cmd::Diagnose(a) => ("diagnose", a),
        Cmd::Sweep(a) => ("sweep", a),
        Cmd::Oracle(a) => ("oracle", a),
    };
    match dispatch(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(name: &str, args: &RunArgs) -> anyhow::Result<()> {
    let lc = config::load(&args.config, &args.set, name)?;
    match name {
        "train" => commands::train::run(&lc),
        "eval" => commands::eval::run(&lc),
        "diagnose" => commands::diagnose::run(&lc),
        "sweep" => commands::sweep::run(&lc),
        "oracle" => commands::oracle::run(&lc),
        _ => unreachable!("exhaustive subcommand match"),
    }
}

//! `gde`: simulate, train, evaluate and report graph neural ODE experiments.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gde_core::{GdeError, Result};

use commands::{Invocation, Source};
use config::{parse_horizons, parse_seeds};

#[derive(Parser)]
#[command(name = "gde", version, about = "Graph neural ODE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Seeds as `3`, `0,2,5` or the inclusive range `0..9`.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a particle rollout from the `[sim]` section.
    Simulate(RunArgs),
    /// Train the configured model once per seed.
    Train(RunArgs),
    /// Evaluate checkpoints and write report.csv and report.json.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// A checkpoint file, a training output directory, or `oracle`.
        #[arg(long)]
        checkpoint: String,
        /// Comma-separated extrapolation horizons.
        #[arg(long)]
        horizons: Option<String>,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Append a deliberately corrupted gradient to the suite.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Merge evaluation reports into one table per metric.
    Report {
        /// report.json files or directories containing one.
        inputs: Vec<PathBuf>,
        /// Write the merged CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn invocation(run: &RunArgs, horizons: Option<&str>) -> Result<Invocation> {
    let seeds = run.seeds.as_deref().map(parse_seeds).transpose()?;
    let horizons = horizons.map(parse_horizons).transpose()?;
    Invocation::new(&run.config, seeds, horizons, run.out.as_deref())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate(args) => commands::simulate_cmd(&invocation(&args, None)?, args.seeds.is_some())?,
        Command::Train(args) => commands::train_cmd(&invocation(&args, None)?)?,
        Command::Eval { run, checkpoint, horizons } => {
            let inv = invocation(&run, horizons.as_deref())?;
            let seeds = run.seeds.as_ref().map(|_| inv.config.seeds.as_slice());
            commands::eval_cmd(&inv, &Source::resolve(&checkpoint, seeds)?)?
        }
        Command::Gradcheck { out, inject_fault } => return commands::gradcheck_cmd(out.as_deref(), inject_fault),
        Command::Report { inputs, out } => commands::report_cmd(&inputs, out.as_deref())?,
    }
    Ok(true)
}

fn exit_code(e: &GdeError) -> u8 {
    match e {
        _ if e.is_numerical() => 3,
        GdeError::ZeroTarget { .. } => 3,
        GdeError::Io { .. } | GdeError::Parse { .. } | GdeError::Json(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GDE_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

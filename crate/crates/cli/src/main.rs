//! `ambsde` — batch runner for the anticipated mean-field BSDE laboratory.
//!
//! Usage: `ambsde <command> --config <file> [--out <dir>] [--seed <u64>]`.
//! Exit codes: 0 pass/success, 1 verdict fail, 2 configuration error,
//! 3 solver failure or non-convergence.

mod config;
mod run;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ambsde", version, about = "Particle solver and verification instruments for anticipated mean-field BSDEs with jumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `experiment.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override; the config seed is used when absent.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the anticipated equation and export the solution field.
    Solve(RunArgs),
    /// Run the fixed-point loop and report its contraction behaviour.
    Contraction(RunArgs),
    /// Solve an ordered pair of mean-field problems and check the
    /// pathwise ordering.
    Compare(RunArgs),
    /// Run the monotone chain against a directly solved limit.
    Monotone(RunArgs),
    /// Evaluate both sides of the a priori energy bound.
    Apriori(RunArgs),
    /// Validate a configuration without solving.
    Validate(RunArgs),
    /// Print the driver and terminal catalogue.
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Solve(a) => ("solve", Some(a)),
        Command::Contraction(a) => ("contraction", Some(a)),
        Command::Compare(a) => ("compare", Some(a)),
        Command::Monotone(a) => ("monotone", Some(a)),
        Command::Apriori(a) => ("apriori", Some(a)),
        Command::Validate(a) => ("validate", Some(a)),
        Command::List => ("list", None),
    };
    let result = match args {
        Some(a) => run::execute(name, &a.config, a.out.clone(), a.seed),
        None => run::cmd_list(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("ambsde {name}: {}", failure.message());
            ExitCode::from(failure.exit_code())
        }
    }
}

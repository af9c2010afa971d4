//! `mfk`: command-line driver for the mean-field filtering library.

mod commands;
mod expr;
mod scenario_file;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Command, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "mfk",
    version,
    about = "Optimal linear filtering for interacting linear flows"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    /// Scenario file, or one of the built-ins `classical` and `normal-flow`.
    #[arg(long, global = true, default_value = "classical")]
    scenario: String,

    /// Override the number of time steps.
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Monte Carlo replications.
    #[arg(long, global = true)]
    paths: Option<usize>,

    #[arg(long, global = true, default_value_t = 20240607)]
    seed: u64,

    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "mfk-out")]
    out: PathBuf,

    /// Step of the finite-difference gradient check.
    #[arg(long, global = true, default_value_t = 1e-4)]
    eps: f64,

    /// Gradient sup-norm tolerance; `1e-4 (1 + |J|)` when absent.
    #[arg(long, global = true)]
    grad_tol: Option<f64>,

    #[arg(long, global = true, default_value_t = 500)]
    max_iter: usize,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,

    /// Gain expression in `t`, `zero`, or `optimal`; replaces the scenario's gain.
    #[arg(long, global = true)]
    gain: Option<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Sub {
    /// Simulate state, observation and filter paths; write paths and error statistics.
    Simulate,
    /// Write the transition kernels and their residuals.
    Kernels,
    /// Write the error covariance and its derivative consistency check.
    Covariance,
    /// Compare the gradient against finite differences of the cost.
    Gradcheck,
    /// Optimize the gain and write the iteration history and filter.
    Optimize,
    /// Run the acceptance suite on the built-in scenarios.
    Validate,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Simulate => Command::Simulate,
            Sub::Kernels => Command::Kernels,
            Sub::Covariance => Command::Covariance,
            Sub::Gradcheck => Command::Gradcheck,
            Sub::Optimize => Command::Optimize,
            Sub::Validate => Command::Validate,
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("MFK_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("MFK_THREADS must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: stage `setup` failed: {e}");
        return ExitCode::FAILURE;
    }
    let config = RunConfig {
        command: cli.command.into(),
        scenario: cli.scenario,
        steps: cli.steps,
        paths: cli.paths,
        seed: cli.seed,
        out: cli.out,
        eps: cli.eps,
        grad_tol: cli.grad_tol,
        max_iter: cli.max_iter,
        force: cli.force,
        gain: cli.gain,
    };
    match commands::run(&config) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if !e.partial.is_empty() {
                eprintln!("partial outputs (see PARTIAL in {}):", config.out.display());
                for p in &e.partial {
                    eprintln!("  {}", p.display());
                }
            }
            ExitCode::FAILURE
        }
    }
}

//! Command line front end for the tensor-greedy pricing library.
//!
//! Exit codes: 0 success, 2 configuration or input problems, 3 a refused
//! unstable time step, 4 a numerical failure inside a solver.

mod commands;
mod config;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use config::Run;
use std::path::PathBuf;
use std::process::ExitCode;
use tensor_greedy::greedy_l2::GreedyConfig;
use tensor_greedy::Error as TgError;

#[derive(Parser)]
#[command(name = "tg", about = "Greedy tensor pricing of basket options", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory from the configuration.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the greedy RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose the basket put payoff on the unit cube and report residuals.
    Decompose {
        #[command(flatten)]
        common: Common,
    },
    /// Run the greedy IMEX time stepper and store the full solution.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Proceed past the explicit-part stability bound (logged).
        #[arg(long)]
        allow_unstable: bool,
    },
    /// Price a stored solution at one or more spot vectors.
    Price {
        #[command(flatten)]
        common: Common,
        /// Time to maturity (defaults to the solved horizon).
        #[arg(long)]
        tau: Option<f64>,
        /// Spot vector as comma-separated values; repeatable.
        #[arg(long = "spot")]
        spots: Vec<String>,
    },
    /// Variance-reduction table over dimensions and correlations.
    Varred {
        #[command(flatten)]
        common: Common,
        /// Override the Monte Carlo path count.
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Per-slice relative error of a stored geometric-put solution.
    Error {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Decompose { common }
            | Command::Solve { common, .. }
            | Command::Price { common, .. }
            | Command::Varred { common, .. }
            | Command::Error { common } => common,
        }
    }
}

/// The payoff-decomposition knobs and the per-step enrichment knobs; the
/// seed flag overrides both.
fn greedy_configs(run: &Run, seed: Option<u64>) -> (GreedyConfig, GreedyConfig) {
    let mut cfg = run.config.greedy.to_config();
    let mut step = run
        .config
        .step_greedy
        .as_ref()
        .map_or_else(config::step_defaults, |k| {
            k.to_config_from(config::step_defaults())
        });
    if let Some(s) = seed {
        cfg.rng_seed = s;
        step.rng_seed = s;
    }
    (cfg, step)
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let mut run = Run::load(&common.config)?;
    if let Some(dir) = &common.output {
        run.output_dir = dir.clone();
    }
    let (cfg, step) = greedy_configs(&run, common.seed);
    match &cli.command {
        Command::Decompose { .. } => commands::cmd_decompose(&run, &cfg),
        Command::Solve { allow_unstable, .. } => {
            commands::cmd_solve(&run, &cfg, &step, *allow_unstable)
        }
        Command::Price { tau, spots, .. } => commands::cmd_price(&run, *tau, spots),
        Command::Varred { paths, .. } => commands::cmd_varred(&run, &step, *paths),
        Command::Error { .. } => commands::cmd_error(&run),
    }
}

/// Maps a failure to the documented exit code by scanning the error chain
/// for the innermost library error.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(tg) = cause.downcast_ref::<TgError>() {
            return match tg {
                TgError::UnstableTimeStep { .. } => 3,
                TgError::EnrichmentFailure { .. }
                | TgError::SingularSystem { .. }
                | TgError::DegenerateFactor
                | TgError::DegenerateReference
                | TgError::PartialSolution { .. } => 4,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("TG_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    eprintln!("error: cannot configure {n} threads: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: TG_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

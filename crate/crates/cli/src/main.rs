use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fpk_core::experiments::{self, RunOutcome, SweepParam, OUTPUT_ROOT_ENV};

/// Quantitative stability checks for Fokker-Planck equations.
#[derive(Parser, Debug)]
#[command(name = "fpk", version, about)]
struct Cli {
    /// Root directory for all outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "fpk-out")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the checks listed in a scenario config.
    Run { config: PathBuf },
    /// Re-run a config over a list of parameter values and fit log-log rates.
    Sweep {
        config: PathBuf,
        /// kappa, delta, epsilon-mollifier, grid-resolution or particle-count.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Optimal transport between two point clouds stored as CSV.
    Ot {
        mu_a: PathBuf,
        mu_b: PathBuf,
        /// log-squared, log-linear or power.
        #[arg(long, default_value = "log-squared")]
        cost: String,
        /// Scale of the log costs, or the exponent of the power cost.
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
    },
    /// Solve the backward regularising system for the drift of a config.
    Zvonkin { config: PathBuf },
    /// Recompute the constants manifest on the held-out scenario family.
    CalibrateConstants {
        #[arg(long, default_value_t = 20240601)]
        seed: u64,
    },
}

fn report(outcome: &RunOutcome) -> ExitCode {
    for c in &outcome.checks {
        println!("{:<40} {}", c.name, if c.pass { "pass" } else { "FAIL" });
    }
    println!("outputs: {}", outcome.dir.display());
    ExitCode::from(outcome.exit_code() as u8)
}

fn calibrate(seed: u64, root: &Path) -> Result<ExitCode> {
    let constants = experiments::calibrate(seed)?;
    std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let path = root.join("constants.json");
    std::fs::write(&path, constants.to_json())?;
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn execute(cli: Cli) -> Result<ExitCode> {
    let root = &cli.output_root;
    Ok(match cli.command {
        Command::Run { config } => report(&experiments::run(&config, root)?),
        Command::Sweep { config, param, values } => {
            let param = SweepParam::parse(&param)?;
            report(&experiments::sweep(&config, param, &values, root)?)
        }
        Command::Ot {
            mu_a,
            mu_b,
            cost,
            delta,
        } => {
            let summary = experiments::ot_files(&mu_a, &mu_b, &cost, delta, root)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            ExitCode::SUCCESS
        }
        Command::Zvonkin { config } => report(&experiments::zvonkin_run(&config, root)?),
        Command::CalibrateConstants { seed } => calibrate(seed, root)?,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

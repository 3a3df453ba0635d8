use std::path::PathBuf;
use std::process::ExitCode;

use airfl::config::{validate_config, ExperimentConfig};
use airfl::runner::{run_experiment, selftest, Mode};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

/// Over-the-air federated learning simulator.
#[derive(Parser)]
#[command(name = "airfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration value by dotted key, e.g. `power.server_dbw=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
            .with_context(|| format!("loading {}", self.config.display()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one cell per seed at the configured antenna count and server power.
    Run(ConfigArgs),
    /// Train every (antennas, server power, seed) cell of the sweep axes.
    Sweep(ConfigArgs),
    /// Check a configuration and print the resolved linear-unit values.
    Validate {
        #[command(flatten)]
        args: ConfigArgs,
        /// Validate the sweep axes instead of the single-run values.
        #[arg(long)]
        sweep: bool,
    },
    /// Run the dataset-free consistency checks.
    Selftest,
}

fn execute(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::Run(args) => experiment(&args, Mode::Single),
        Command::Sweep(args) => experiment(&args, Mode::Sweep),
        Command::Validate { args, sweep } => {
            let report = validate_config(&args.load()?, sweep)?;
            print!("{report}");
            println!("configuration is valid");
            Ok(true)
        }
        Command::Selftest => {
            let checks = selftest();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn experiment(args: &ConfigArgs, mode: Mode) -> anyhow::Result<bool> {
    let report = run_experiment(&args.load()?, mode)?;
    for c in &report.cells {
        println!(
            "{}: final accuracy {:.4}, final loss {:.4}, mean MSE {:.3e}",
            c.cell.name(),
            c.final_test_accuracy,
            c.final_train_loss,
            c.mean_mse_analytic
        );
    }
    println!("results written to {}", report.output_dir.display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

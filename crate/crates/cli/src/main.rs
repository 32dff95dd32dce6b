use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedema_cli::commands;
use fedema_cli::CliError;

#[derive(Parser)]
#[command(name = "fedema", about = "Federated continual-learning simulator", version)]
struct Cli {
    /// Suppress progress output (errors still go to stderr).
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for report.json, metrics.csv, and model.fema.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep one hyperparameter axis across several values.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Axis to sweep: "lambda" or "window".
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify the analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate synthetic scenes and export them to disk.
    ExportScenes {
        #[arg(long)]
        out: PathBuf,
        /// Drift phase to sample from.
        #[arg(long, default_value_t = 0)]
        phase: usize,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed } => commands::cmd_run(&config, &out, seed, cli.quiet),
        Command::Ablate {
            config,
            out,
            axis,
            values,
            seed,
        } => commands::cmd_ablate(&config, &out, &axis, &values, seed, cli.quiet),
        Command::Gradcheck { seed } => match commands::cmd_gradcheck(seed, cli.quiet) {
            Ok(true) => Ok(()),
            Ok(false) => Err(CliError::Runtime("gradient check failed tolerance".into())),
            Err(e) => Err(e),
        },
        Command::ExportScenes {
            out,
            phase,
            count,
            seed,
        } => commands::cmd_export_scenes(&out, phase, count, seed, cli.quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}

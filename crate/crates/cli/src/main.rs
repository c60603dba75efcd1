use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cavseg_cli::{
    cmd_evaluate, cmd_experiment, cmd_phantom_gen, cmd_predict, cmd_report, cmd_train, CliError, ExperimentArgs,
};

#[derive(Parser)]
#[command(name = "cavseg", version, about = "Resection cavity segmentation on synthetic MRI phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset and its manifest.
    PhantomGen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full cross-validated sequence comparison.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training units run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train a single network.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment cases with a saved checkpoint.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a metrics CSV with box statistics and paired tests.
    Report {
        #[arg(long, alias = "config")]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::PhantomGen { config, out, seed } => {
            let n = cmd_phantom_gen(&config, &out, seed)?;
            println!("wrote {n} cases to {}", out.display());
        }
        Command::Experiment { config, out, seed, jobs } => {
            if jobs == 0 {
                return Err(CliError::Config("--jobs must be >= 1".into()));
            }
            let outcome = cmd_experiment(&ExperimentArgs { config, out, seed, jobs })?;
            print!("{}", outcome.report.to_table());
        }
        Command::Train { config, out, seed } => {
            let ckpt = cmd_train(&config, &out, seed)?;
            println!(
                "best val jaccard {:.4} at iteration {}; checkpoint in {}",
                ckpt.best_val_jaccard,
                ckpt.iteration_of_best,
                out.display()
            );
        }
        Command::Predict { config, out } => {
            let n = cmd_predict(&config, &out)?;
            println!("segmented {n} cases into {}", out.display());
        }
        Command::Evaluate { config, out } => {
            let records = cmd_evaluate(&config, &out)?;
            let mean = records.iter().map(|r| r.dice).sum::<f64>() / records.len() as f64;
            println!("{} cases, mean dice {mean:.4}", records.len());
        }
        Command::Report { metrics, out } => {
            print!("{}", cmd_report(&metrics, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

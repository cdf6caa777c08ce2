//! Command-line driver: generate benchmarks, run adaptation experiments,
//! evaluate checkpoints, and export diagnostics.

use clap::{Parser, Subcommand};
use covalign::cli::{self, CliError, ExperimentConfig, Method};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "covalign",
    about = "Domain-adaptive segmentation with category-feature covariance alignment",
    version
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-domain dataset splits into a directory.
    Gen {
        /// Experiment config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train the configured method and write checkpoints, traces, and
    /// the results table.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run output directory.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; overrides config.data.root.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Method: source_only | st_baseline | mse_align | triplet_align | dca.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Evaluate checkpoints on a dataset split (a Table-style report).
    Eval {
        /// Checkpoints to evaluate, one table row each.
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// source_train | source_val | target_train | target_val.
        #[arg(long, default_value = "target_val")]
        split: String,
        /// Optional CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export correlation heatmaps and a 2-D feature projection for a
    /// checkpoint.
    Diag {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(args: Args) -> Result<(), CliError> {
    match args.command {
        Command::Gen {
            config,
            out,
            seed,
            overwrite,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cli::cmd_gen(&cfg, &out, overwrite)?;
            println!("dataset written to {} (config {})", out.display(), cfg.hash());
            Ok(())
        }
        Command::Run {
            config,
            out,
            data,
            seed,
            method,
            overwrite,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = method {
                cfg.method = Method::parse(&m)
                    .ok_or_else(|| CliError::Config(format!("unknown method {m}")))?;
            }
            if let Some(d) = data {
                cfg.data.root = Some(d.display().to_string());
            }
            cfg.validate()?;
            let artifacts = cli::cmd_run(&cfg, &out, overwrite)?;
            let last = artifacts.outcome.stages.last().expect("at least pretrain");
            println!(
                "{} finished: source mIoU {:?}, target mIoU {:?} (config {})",
                cfg.method.name(),
                last.source_miou,
                last.target_miou,
                artifacts.hash
            );
            Ok(())
        }
        Command::Eval {
            checkpoints,
            data,
            split,
            out,
        } => {
            let table = cli::cmd_eval(&checkpoints, &data, &split, out.as_deref())?;
            print!("{table}");
            Ok(())
        }
        Command::Diag {
            checkpoint,
            data,
            out,
            seed,
        } => {
            let report = cli::cmd_diag(&checkpoint, &data, &out, seed)?;
            println!(
                "mean diagonal correlation: source-source {:?}, source-target {:?}",
                report.ss_mean_diagonal, report.st_mean_diagonal
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

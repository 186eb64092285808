//! `dbm` — generate long-tailed datasets, train margin-loss models,
//! evaluate and analyze them, verify gradients, and run sweeps.

mod commands;
mod config;
mod runner;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dbm_core::error::ErrorClass;
use dbm_core::Result;

#[derive(Parser)]
#[command(name = "dbm", version, about = "Difficulty-aware balancing margin laboratory")]
struct Cli {
    /// Worker threads for parallel subcommands (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset from a config file.
    GenData {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output root; overrides config and DBM_OUT_ROOT.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write human-readable CSV copies.
        #[arg(long)]
        csv: bool,
    },
    /// Train one model and write checkpoint, logs, and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the training seed (data stays as configured).
        #[arg(long)]
        seed: Option<u64>,
        /// Load the dataset from this directory instead of generating.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset, split by class frequency.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file (.dbm) to evaluate on.
        #[arg(long)]
        dataset: PathBuf,
        /// Dataset whose class counts define the frequency groups
        /// (default: the evaluation dataset itself).
        #[arg(long)]
        counts_from: Option<PathBuf>,
        /// Minimum count for the many-shot group.
        #[arg(long, default_value_t = 100)]
        many_min: usize,
        /// Maximum count for the few-shot group.
        #[arg(long, default_value_t = 20)]
        few_max: usize,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Geometry report: margins, angles, norms, separability.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Dataset providing training counts for the margin schedule
        /// (default: the analysis dataset itself).
        #[arg(long)]
        counts_from: Option<PathBuf>,
        /// Output directory for report.json and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Random loss-level cases per family.
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Random end-to-end model cases.
        #[arg(long, default_value_t = 100)]
        model_cases: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Deliberately skew analytic gradients by this relative factor
        /// to prove the harness catches wrong gradients.
        #[arg(long, hide = true)]
        perturb: Option<f64>,
    },
    /// Run a grid of experiment arms over seeds, in parallel.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, csv } => commands::gen_data(&config, out.as_deref(), csv),
        Command::Train {
            config,
            out,
            seed,
            data,
        } => commands::train_cmd(&config, out.as_deref(), seed, data.as_deref()),
        Command::Eval {
            checkpoint,
            dataset,
            counts_from,
            many_min,
            few_max,
            out,
        } => commands::eval_cmd(
            &checkpoint,
            &dataset,
            counts_from.as_deref(),
            many_min,
            few_max,
            out.as_deref(),
        ),
        Command::Analyze {
            checkpoint,
            dataset,
            counts_from,
            out,
        } => commands::analyze_cmd(&checkpoint, &dataset, counts_from.as_deref(), out.as_deref()),
        Command::Gradcheck {
            cases,
            model_cases,
            seed,
            perturb,
        } => commands::gradcheck_cmd(cases, model_cases, seed, perturb),
        Command::Sweep { config, out } => sweep::sweep_cmd(&config, out.as_deref(), cli.threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Validation => ExitCode::from(2),
                ErrorClass::Io => ExitCode::from(3),
                ErrorClass::Numeric => ExitCode::from(4),
            }
        }
    }
}

//! `amean`: dataset generation, training, ablation, k-sweeps and evaluation.
//!
//! Exit codes: 0 success, 1 configuration or IO failure, 2 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{EvalOptions, RunOptions};

#[derive(Parser)]
#[command(name = "amean", version, about = "Blended-target domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this seed only instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Workers for independent runs.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions { out: self.out.clone(), seed: self.seed, threads: self.threads }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blended-target dataset from a data spec.
    Generate {
        /// Data spec (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Dataset CSV to write; the manifest goes next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the configured variant for every seed.
    Train(RunArgs),
    /// Train the five ablation variants and tabulate accuracy.
    Ablate(RunArgs),
    /// Train the full method for each number of meta-sub-targets.
    SweepK {
        #[command(flatten)]
        run: RunArgs,
        /// Values of k, e.g. `2,3,4` or `2..8`.
        #[arg(long)]
        k_list: String,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory for the report and embedding export.
        #[arg(long)]
        out: PathBuf,
        /// Seed recorded in the report.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Variant name recorded in the report.
        #[arg(long, default_value = "eval")]
        label: String,
        /// Degrees of freedom for the partition diagnostic.
        #[arg(long, default_value_t = 1.0)]
        dof: f64,
    },
}

fn run(cli: Cli) -> amean::Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => commands::generate(&config, &out, seed),
        Command::Train(args) => commands::train(&args.config, &args.options()),
        Command::Ablate(args) => commands::ablate(&args.config, &args.options()),
        Command::SweepK { run, k_list } => commands::sweep_k(&run.config, &commands::parse_k_list(&k_list)?, &run.options()),
        Command::Eval { checkpoint, dataset, out, seed, label, dof } => {
            commands::eval(&checkpoint, &dataset, &out, &EvalOptions { seed, label, dof })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

//! Command-line front end: synthetic-data generation, training runs,
//! missing-rate sweeps, and report aggregation.
//!
//! Exit codes: 0 on success, 1 for usage or validation problems (bad flags,
//! bad config keys, malformed files), 2 when a computation fails numerically.

mod config;
mod pipeline;
mod report;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use missnodags::error::{Error, ErrorCategory};

#[derive(Parser)]
#[command(
    name = "missnodags",
    version,
    about = "Learn cyclic causal graphs from interventional data with missing values"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a ground-truth model and write a masked dataset manifest,
    /// the true graph, and a complete held-out split.
    Generate {
        /// Experiment config file (`section.key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Master seed for the graph, weights, draws, and mask.
        #[arg(long)]
        seed: u64,
        /// Output directory for the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method on an existing manifest directory.
    Train {
        /// Manifest directory (as produced by `generate`).
        #[arg(long)]
        data: PathBuf,
        /// Experiment config file; the `train.*` section drives the run.
        #[arg(long)]
        config: PathBuf,
        /// missnodags | mean_impute_then_learn | clean
        #[arg(long)]
        method: String,
        /// Output directory for the run artifacts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full missing-rate × method × seed grid and summarize it.
    Sweep {
        /// Experiment config file; `missing.rates`, `run.methods`, and
        /// `run.seeds` define the grid.
        #[arg(long)]
        config: PathBuf,
        /// Output directory: per-run artifacts under runs/, plus
        /// summary.csv and summary_agg.csv.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for grid cells (default: one per CPU).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Aggregate every summary.csv under a directory into one tidy table.
    Report {
        /// Directory tree containing sweep outputs.
        #[arg(long)]
        runs: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is a
            // usage error and must exit 1 (clap's default would be 2, which
            // this tool reserves for numerical failures).
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.category() {
                ErrorCategory::Usage => ExitCode::from(1),
                ErrorCategory::Numerical => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { config, seed, out } => {
            let (d, rows) = pipeline::cmd_generate(&config, seed, &out)?;
            println!(
                "wrote dataset (d = {d}, {rows} rows) and held-out split to {}",
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            method,
            out,
        } => {
            let outcome = pipeline::cmd_train(&data, &config, &method, &out)?;
            let shd = outcome
                .shd
                .map_or("unknown (no ground truth)".to_string(), |v| v.to_string());
            println!(
                "run finished in {:.1}s: shd = {shd}, test nll = {:.4}; artifacts in {}",
                outcome.wall_time_s,
                outcome.nll_test,
                out.display()
            );
        }
        Command::Sweep { config, out, jobs } => {
            let n = sweep::cmd_sweep(&config, &out, jobs)?;
            println!("sweep finished: {n} runs summarized in {}", out.display());
        }
        Command::Report { runs, out } => {
            let n = report::cmd_report(&runs, &out)?;
            println!("report written to {} ({n} rate/method rows)", out.display());
        }
    }
    Ok(())
}

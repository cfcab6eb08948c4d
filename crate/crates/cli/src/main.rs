//! `objmem`: generate worlds, run the online pipeline, answer queries from a
//! memory dump, evaluate results and sweep parameters.

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Streaming object memory experiments on simulated egocentric video.
#[derive(Debug, Parser)]
#[command(name = "objmem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override any configuration key, e.g. `--set world.n_objects=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a world and write it as JSON.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Stream a world through the population pipeline once.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for the memory dump, step log, queries and report.
        #[arg(long, short)]
        out_dir: PathBuf,
        /// Audit the memory after every step instead of only at the end.
        #[arg(long)]
        audit_every_step: bool,
    },
    /// Answer queries from a memory dump alone.
    Query {
        /// Memory dump written by `run` (JSON or binary).
        #[arg(long, short)]
        memory: PathBuf,
        /// JSON array of queries with `query_id` and `features`.
        #[arg(long, short)]
        queries: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        lambda_ret: f64,
    },
    /// Score query results against ground truth, or trace metrics over
    /// stream fractions.
    Evaluate(EvaluateArgs),
    /// Run the pipeline for each value of one parameter.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// budget-cap, detector-miss-rate, tracker-loss-rate, strategy,
        /// lambda-ret or seed.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Seeds to repeat every value with; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Use seeds 0..N instead of an explicit list.
        #[arg(long, conflicts_with = "seeds")]
        seed_count: Option<u64>,
        #[arg(long, value_enum, default_value_t = TableFormat::Csv)]
        format: TableFormat,
        /// Table destination; stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Results written by `query`.
    #[arg(long, required_unless_present = "curve")]
    results: Option<PathBuf>,
    /// Queries with ground truth, as written by `run`.
    #[arg(long, required_unless_present = "curve")]
    ground_truth: Option<PathBuf>,
    /// Evaluate at 25/50/75/100% of the stream of a fresh run instead.
    #[arg(long, requires = "config", conflicts_with_all = ["results", "ground_truth"])]
    curve: bool,
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for SVG charts (curve mode).
    #[arg(long, requires = "curve")]
    plots: Option<PathBuf>,
    /// Report destination; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TableFormat {
    Csv,
    Json,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Audit(anyhow::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Audit(_) => 2,
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(err: E) -> Self {
        let err = err.into();
        let audit = err
            .chain()
            .any(|cause| matches!(cause.downcast_ref::<objmem::Error>(), Some(objmem::Error::Audit(_))));
        if audit {
            Failure::Audit(err)
        } else {
            Failure::Usage(err)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::Usage(err) | Failure::Audit(err)) = &failure;
            eprintln!("error: {err:#}");
            ExitCode::from(failure.exit_code())
        }
    }
}

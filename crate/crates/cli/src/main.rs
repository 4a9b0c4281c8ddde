//! `trajgraph` command line: synthetic data, ingest, graph building,
//! training, evaluation and gradient checking.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "TRAJGRAPH_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "trajgraph", version, about = "Individual mobility graphs and their representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `key = value` lines (default: $TRAJGRAPH_CONFIG).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InputFormat {
    /// Header row with user_id, timestamp, latitude, longitude, venue_id, category.
    Checkins,
    /// Tab-separated Foursquare dump without header.
    Foursquare,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic check-in corpus and its profile labels.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        users_per_profile: usize,
        #[arg(long, default_value_t = 10)]
        days: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Parses check-ins into daily trajectories.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = InputFormat::Checkins)]
        format: InputFormat,
        /// Category table replacing the built-in one.
        #[arg(long)]
        categories: Option<PathBuf>,
        /// Fail on the first malformed line.
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Builds one graph per user from a trajectory store.
    BuildGraph {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        categories: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Summarizes a graph file.
    Stats {
        #[arg(long)]
        input: PathBuf,
        /// Directory for the summary and histograms.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Trains the encoder on a graph file.
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Run directory for checkpoint, log, split and state.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the state saved in the run directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Scores a trained model on its held-out users.
    Eval {
        #[arg(long)]
        input: PathBuf,
        /// Run directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Probability threshold for every head (default: 0.5 for the
        /// category and time heads, 1/cells for the joint head).
        #[arg(long)]
        threshold: Option<f64>,
        /// Index bins of the response matrices.
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Trajectory store, needed for the activity index matrices.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Writes one embedding row per user.
    ExportEmbeddings {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compares backpropagated and finite-difference gradients on a fixed
    /// three-location graph.
    Gradcheck {
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Check at most this many entries per tensor instead of all.
        #[arg(long)]
        sample: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { CliError::USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

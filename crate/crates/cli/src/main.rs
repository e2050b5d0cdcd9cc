//! `synicl`: synthetic data, splits, training, evaluation, context
//! optimization and retrieval ranking from the command line.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use synicl::{Error, ErrorKind, Result};

#[derive(Debug, Parser)]
#[command(name = "synicl", version, about = "In-context drug-synergy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file layered over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Cap on worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Seed for every random stream of the run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a latent world and a synergy CSV from it.
    Synth(commands::SynthArgs),
    /// Partition a dataset around held-out entities.
    Split(commands::SplitArgs),
    /// Train a model on a split.
    Train(commands::TrainArgs),
    /// Zero-shot or few-shot evaluation of a checkpoint.
    Eval(commands::EvalArgs),
    /// Search for fixed per-entity contexts with a frozen checkpoint.
    Optimize(commands::OptimizeArgs),
    /// Retrieval rank curves for the masked drug.
    Rank(commands::RankArgs),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(a) => &a.common,
            Command::Split(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Optimize(a) => &a.common,
            Command::Rank(a) => &a.common,
        }
    }
}

fn run(command: &Command) -> Result<()> {
    let start = Instant::now();
    if let Some(n) = command.common().threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let done = match command {
        Command::Synth(a) => commands::synth(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Optimize(a) => commands::optimize(a),
        Command::Rank(a) => commands::rank(a),
    }?;
    let secs = start.elapsed().as_secs_f64();
    done.run.finish(std::env::args().collect(), &done.config_json, done.seed, secs)
}

fn main() -> ExitCode {
    match run(&Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Runtime => 1,
            })
        }
    }
}

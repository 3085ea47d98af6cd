mod config;
mod tasks;

use clap::{Args, Parser, Subcommand};
use config::{CliError, Flags, RunConfig};
use std::path::PathBuf;

/// Gradual query pruning experiments on synthetic detection scenes.
#[derive(Parser)]
#[command(name = "gpq", version)]
struct Cli {
    #[command(subcommand)]
    task: Task,
}

#[derive(Subcommand)]
enum Task {
    /// Write a training set and a held-out set.
    GenData(Common),
    /// Train a detector from scratch.
    Train(Common),
    /// Gradually prune queries from a checkpoint while fine-tuning.
    Prune(Common),
    /// Compute mAP on the held-out set.
    Eval(Common),
    /// Report FLOPs and/or forward latency per query count.
    Bench(Common),
    /// Selection frequency and reference-point exports.
    Analyze(Common),
}

#[derive(Args)]
struct Common {
    /// `key=value` config file (`#` comments); flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: Flags,
}

impl Task {
    fn name(&self) -> &'static str {
        match self {
            Task::GenData(_) => "gen-data",
            Task::Train(_) => "train",
            Task::Prune(_) => "prune",
            Task::Eval(_) => "eval",
            Task::Bench(_) => "bench",
            Task::Analyze(_) => "analyze",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Task::GenData(c) | Task::Train(c) | Task::Prune(c) | Task::Eval(c) | Task::Bench(c) | Task::Analyze(c) => c,
        }
    }
}

fn run(task: &Task) -> Result<(), CliError> {
    let common = task.common();
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.flags, task.name())?;
    cfg.validate()?;
    match task {
        Task::GenData(_) => tasks::gen_data(&cfg),
        Task::Train(_) => tasks::train(&cfg),
        Task::Prune(_) => tasks::prune(&cfg),
        Task::Eval(_) => tasks::eval(&cfg),
        Task::Bench(_) => tasks::bench(&cfg),
        Task::Analyze(_) => tasks::analyze(&cfg),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli.task) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}

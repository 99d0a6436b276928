//! `tspnco`: data generation, training, evaluation, sweeps and plots.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Invalid arguments or configuration; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "tspnco", version, about = "Neural construction heuristics for 2D Euclidean TSP")]
struct Cli {
    /// Worker threads for data-parallel work; defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a uniform random dataset, optionally solved.
    Generate(GenerateArgs),
    /// Train a policy with supervised or reinforcement learning.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset.
    Eval(EvalArgs),
    /// Evaluate a checkpoint across graph sizes and decode modes.
    Sweep(SweepArgs),
    /// Emit curve data, charts and a comparison table from reports.
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// none, heldkarp, bruteforce or twoopt.
    #[arg(long, default_value = "none")]
    pub solve: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// sl or rl.
    #[arg(long)]
    pub paradigm: Option<String>,
    /// rollout or critic; reinforcement learning only.
    #[arg(long)]
    pub baseline: Option<String>,
    /// gat or gcn.
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labelled dataset; required for supervised learning.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub epoch_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub graph_size: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    #[arg(long)]
    pub val_every: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to evaluate on; otherwise one is generated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Size of the generated set; defaults to the training size.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma list of greedy, sample:K, beam:W.
    #[arg(long)]
    pub decode: Option<String>,
    #[arg(long)]
    pub decode_seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fail rather than fall back to heuristic references.
    #[arg(long)]
    pub exact_only: bool,
    /// Model name in the report.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma list of graph sizes, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub decode: Option<String>,
    #[arg(long)]
    pub decode_seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub exact_only: bool,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args)]
pub struct PlotArgs {
    /// Report CSVs written by eval or sweep.
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use tspnco::Error as E;
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<E>() {
        Some(E::Config(_) | E::SizeLimit { .. } | E::ReferenceUnavailable { .. } | E::MissingLabels) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Plot(a) => commands::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

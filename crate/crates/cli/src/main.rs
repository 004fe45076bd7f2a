mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Lazy convolutional inference: generate, trace, train, evaluate, search.
#[derive(Debug, Parser)]
#[command(name = "lazyconv", version)]
struct Cli {
    /// Worker threads for trace, sweep and pareto; 0 uses every core, 1 is fully serial.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the reference synthetic model and its self-labeled dataset.
    GenSynthetic(GenArgs),
    /// Record unpruned per-layer strengths for every sample.
    Trace(TraceArgs),
    /// Fit one strength predictor per consecutive conv pair.
    TrainPredictor(TrainArgs),
    /// Accuracy and cost of one keep policy.
    Eval(EvalArgs),
    /// Accuracy when pruning a single layer at each fraction.
    Sweep(SweepArgs),
    /// Time each conv layer alone at each fraction (always single-threaded).
    Bench(BenchArgs),
    /// NSGA-II search over per-layer keep fractions.
    Pareto(ParetoArgs),
    /// Bytes needed by a conv-fed dense layer at given active fractions.
    MemReport(MemArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    /// Output directory; receives `model/` and `data/`.
    #[arg(long, default_value = "synthetic")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Dataset size.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TraceArgs {
    #[arg(long, default_value = "synthetic/model")]
    pub model: PathBuf,
    #[arg(long, default_value = "synthetic/data")]
    pub data: PathBuf,
    #[arg(long, default_value = "traces")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value = "traces")]
    pub traces: PathBuf,
    #[arg(long, default_value = "predictors")]
    pub out: PathBuf,
    /// Seeds the train/validation split and minibatch order.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Fraction of samples used for training.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    /// Keep the step size fixed instead of decaying it linearly.
    #[arg(long)]
    pub constant_step: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, default_value = "synthetic/model")]
    pub model: PathBuf,
    #[arg(long, default_value = "synthetic/data")]
    pub data: PathBuf,
    /// Needed whenever the policy keeps less than every filter of a layer.
    #[arg(long)]
    pub predictors: Option<PathBuf>,
    /// `all-<fraction>` or a JSON file mapping conv layer names to fractions.
    #[arg(long, default_value = "all-1.0")]
    pub policy: String,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
    /// Also time eager and lazy passes over this many samples (0 skips timing).
    #[arg(long, default_value_t = 0)]
    pub timing_samples: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, default_value = "synthetic/model")]
    pub model: PathBuf,
    #[arg(long, default_value = "synthetic/data")]
    pub data: PathBuf,
    /// Required in predicted mode.
    #[arg(long)]
    pub predictors: Option<PathBuf>,
    /// Conv layer to prune; every conv layer when omitted.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value = "oracle")]
    pub mode: String,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, default_value = "synthetic/model")]
    pub model: PathBuf,
    /// The first sample is the benchmark input.
    #[arg(long, default_value = "synthetic/data")]
    pub data: PathBuf,
    /// Conv layer to time; every conv layer when omitted.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 21)]
    pub reps: usize,
    #[arg(long, default_value = "bench")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ParetoArgs {
    #[arg(long, default_value = "synthetic/model")]
    pub model: PathBuf,
    #[arg(long, default_value = "synthetic/data")]
    pub data: PathBuf,
    #[arg(long, default_value = "predictors")]
    pub predictors: PathBuf,
    /// Population size (even, at least 8).
    #[arg(long, default_value_t = 40)]
    pub pop: usize,
    #[arg(long, default_value_t = 30)]
    pub gens: usize,
    /// Samples drawn (seeded) from the dataset for evaluation; 0 uses all.
    #[arg(long, default_value_t = 200)]
    pub subset: usize,
    /// Seeds both the subset draw and the search.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = "pareto")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MemArgs {
    #[arg(long, default_value = "synthetic/model")]
    pub model: PathBuf,
    /// Dense layer fed by flatten of a conv output; the first such layer when omitted.
    #[arg(long)]
    pub layer: Option<String>,
    /// Active fractions of the feeding conv layer's filters.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,1.0")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value = "memory")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    let result = match &cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(a, cli.threads),
        Command::Trace(a) => commands::trace(a, cli.threads),
        Command::TrainPredictor(a) => commands::train_predictor(a, cli.threads),
        Command::Eval(a) => commands::eval(a, cli.threads),
        Command::Sweep(a) => commands::sweep(a, cli.threads),
        Command::Bench(a) => commands::bench(a, cli.threads),
        Command::Pareto(a) => commands::pareto(a, cli.threads),
        Command::MemReport(a) => commands::mem_report(a, cli.threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}

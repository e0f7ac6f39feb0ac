//! `relcon`: synthetic data, pre-training, episodic evaluation, metrics and
//! embedding export from one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure
//! (NaN during training, or a failed gradient check).

mod commands;
mod log_sink;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "relcon", version, about = "Bi-encoder contrastive pre-training for few-shot relation extraction")]
pub struct Cli {
    /// Also write machine-readable JSON lines to this file.
    #[arg(long, global = true, value_name = "FILE")]
    pub log: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, its label file and a train/held-out split.
    GenSynth(GenSynthArgs),
    /// Pre-train the bi-encoder from a run config.
    Pretrain(PretrainArgs),
    /// N-way-K-shot prototype evaluation of a checkpoint.
    EvalFewshot(EvalFewshotArgs),
    /// N-way-0-shot evaluation by matching sentences to label embeddings.
    EvalZeroshot(EvalZeroshotArgs),
    /// Alignment and uniformity of a checkpoint's embeddings on a corpus.
    Metrics(MetricsArgs),
    /// Write normalized sentence and label embeddings as CSV.
    ExportEmbeddings(ExportArgs),
    /// Finite-difference check of every differentiable op and of the full objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Generator spec (JSON); defaults are used for missing fields or without a file.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Overrides the spec's rng_seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Receives checkpoint.bin, train_log.jsonl, vocab.json and config.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Overrides train.rng_seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

/// Where evaluation data comes from: explicit files win over the config.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Run config; supplies corpus.eval, labels and eval defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Evaluation corpus (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Write the JSON report here as well as to stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalFewshotArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Queries per episode [default: N].
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Add each class's label embedding to its prototype.
    #[arg(long)]
    pub label_info: bool,
    /// Rank prototypes by negative squared distance instead of cosine.
    #[arg(long)]
    pub euclidean: bool,
}

#[derive(Debug, Args)]
pub struct EvalZeroshotArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Queries per episode [default: N].
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Seeds pair sampling for sets above the exhaustive limit.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    /// Comma-separated relation ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub relations: Vec<String>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Random cases per op.
    #[arg(long, default_value_t = 5)]
    pub cases: usize,
}

fn command() -> clap::Command {
    Cli::command().mut_subcommand("pretrain", |c| c.after_long_help(commands::config_help()))
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .format(|buf, rec| {
            use std::io::Write;
            writeln!(buf, "{}", rec.args())
        })
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

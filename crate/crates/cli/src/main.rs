//! `lmx`: build element-graphs, train the reasoner, explain and debug its answers.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use lmx_core::debugger::DEFAULT_THRESHOLD;
use lmx_core::explain::{DEFAULT_TASK_TYPE, DEFAULT_TOP_W};

const AFTER_HELP: &str = "\
Settings are resolved as: command-line flag > config file (--config) > environment (LMX_<FLAG>) > default.

Exit codes:
  0  success, every output written
  1  internal error
  2  usage, configuration or missing input file
  3  malformed or inconsistent input data
  4  incompatible or corrupt checkpoint, numerical failure
  5  network, HTTP or replay failure
  6  partial: some items failed and are flagged or omitted";

#[derive(Debug, Parser)]
#[command(name = "lmx", version, about, after_help = AFTER_HELP)]
struct Cli {
    /// Config file of `key = value` lines (keys are long flag names)
    #[arg(long, global = true, value_name = "PATH", env = "LMX_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ground one dataset item and export the element-graph of every choice
    BuildGraph(BuildGraphArgs),
    /// Train the reasoner and write a checkpoint plus per-step metrics
    Train(TrainArgs),
    /// Predict answers with a trained checkpoint
    Infer(InferArgs),
    /// Predict, rank reason-elements and generate two-stage explanations
    Explain(ExplainArgs),
    /// Score explanation bundles with the debugger prompt
    Debug(DebugArgs),
    /// Accuracy, planted-path recall, reliability matrix and Likert summary
    Eval(EvalArgs),
    /// Write a seeded planted-path benchmark (KG, train/test sets, paths)
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Debug, Clone, Args)]
struct GraphArgs {
    /// Knowledge-graph edge list, `head<TAB>relation<TAB>tail` per line
    #[arg(long, value_name = "PATH")]
    kg: PathBuf,
    /// Relation vocabulary, one name per line [default: relations.txt beside --kg]
    #[arg(long, value_name = "PATH")]
    relations: Option<PathBuf>,
    /// Retrieval radius L in hops
    #[arg(long, default_value_t = 2)]
    hops: usize,
    /// Pruning budget K (nodes kept per element-graph)
    #[arg(long, default_value_t = 200)]
    budget: usize,
    /// Relevance scoring for pruning
    #[arg(long, default_value = "mlp", value_parser = ["mlp", "cosine"])]
    score_mode: String,
    /// Seed of the relevance MLP
    #[arg(long, default_value_t = 0)]
    scorer_seed: u64,
}

#[derive(Debug, Clone, Args)]
struct EmbedArgs {
    /// Embedding provider
    #[arg(long, default_value = "synthetic-hash", value_parser = ["synthetic-hash", "file-table", "remote-http"])]
    embed_backend: String,
    /// Embedding dimension D
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    /// Seed of the synthetic-hash provider
    #[arg(long, default_value_t = 0)]
    embed_seed: u64,
    /// Vector table for the file-table provider
    #[arg(long, value_name = "PATH")]
    embed_table: Option<PathBuf>,
    /// Endpoint of the remote-http provider
    #[arg(long, value_name = "URL")]
    embed_url: Option<String>,
    /// Model name sent to the remote-http provider
    #[arg(long, default_value = "text-embedding")]
    embed_model: String,
    /// Token pooling for the input representation
    #[arg(long, default_value = "mean", value_parser = ["mean", "first-token"])]
    pooling: String,
}

#[derive(Debug, Clone, Args)]
struct LlmArgs {
    /// Client mode: offline canned answers, live HTTP, or cassette replay with recording
    #[arg(long, default_value = "mock", value_parser = ["mock", "live", "record-replay"])]
    llm_mode: String,
    /// Chat-completions endpoint (API key is read from LMX_API_KEY)
    #[arg(long, value_name = "URL")]
    llm_url: Option<String>,
    /// Generator model name
    #[arg(long, default_value = "gpt-4-turbo")]
    llm_model: String,
    /// Cassette of recorded responses for record-replay mode
    #[arg(long, value_name = "PATH")]
    cassette: Option<PathBuf>,
    /// JSONL `{prompt, response}` fixtures for mock mode
    #[arg(long, value_name = "PATH")]
    mock_fixtures: Option<PathBuf>,
    /// Per-request timeout in seconds
    #[arg(long, default_value_t = 30.0)]
    timeout_secs: f64,
    /// Retries after the first attempt for 429, 5xx and network errors
    #[arg(long, default_value_t = 2)]
    max_retries: u32,
    /// Concurrent requests in flight
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    /// Admission rate limit in requests per second [default: unlimited]
    #[arg(long)]
    rps: Option<f64>,
    /// Sampling temperature
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    /// Completion length limit
    #[arg(long, default_value_t = 1024)]
    max_tokens: u32,
}

#[derive(Debug, Args)]
struct BuildGraphArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    embed: EmbedArgs,
    /// JSONL dataset of `{id, question, choices, answer?}`
    #[arg(long, value_name = "PATH")]
    dataset: PathBuf,
    /// Item id [default: first item]
    #[arg(long)]
    item: Option<String>,
    /// Output JSON [default: stdout]
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    embed: EmbedArgs,
    /// Training set (JSONL with answers)
    #[arg(long, value_name = "PATH")]
    train: PathBuf,
    /// Dev set, scored at the end of every epoch
    #[arg(long, value_name = "PATH")]
    dev: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Per-step metrics CSV
    #[arg(long, value_name = "PATH", default_value = "metrics.csv")]
    metrics: PathBuf,
    /// GNN feature width F
    #[arg(long, default_value_t = 200)]
    hidden: usize,
    /// Number of attention layers
    #[arg(long, default_value_t = 5)]
    layers: usize,
    /// Dropout on every layer's update
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    /// Answer-head hidden width [default: --hidden]
    #[arg(long)]
    head_hidden: Option<usize>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Learning rate of the GNN and answer head
    #[arg(long, default_value_t = 1e-3)]
    lr_gnn: f64,
    /// Learning rate of a trainable language model (built-in providers are frozen)
    #[arg(long, default_value_t = 1e-5)]
    lr_lm: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Seed for initialization, shuffling and dropout
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop after this many optimizer steps (0 = run every epoch)
    #[arg(long, default_value_t = 0)]
    max_steps: usize,
    /// Worker threads (0 = one per core)
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    embed: EmbedArgs,
    /// Trained checkpoint
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// JSONL dataset
    #[arg(long, value_name = "PATH")]
    dataset: PathBuf,
    /// Output JSONL of `{id, prediction, probabilities, logits}`
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Worker threads (0 = one per core)
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    embed: EmbedArgs,
    #[command(flatten)]
    llm: LlmArgs,
    /// Trained checkpoint
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// JSONL dataset
    #[arg(long, value_name = "PATH")]
    dataset: PathBuf,
    /// Output JSONL of explanation bundles
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Reason-elements per explanation (w)
    #[arg(long, default_value_t = DEFAULT_TOP_W)]
    top_w: usize,
    /// Task description placed in the stage-1 prompt
    #[arg(long, default_value = DEFAULT_TASK_TYPE)]
    task_type: String,
    /// Explain only the first N items
    #[arg(long)]
    limit: Option<usize>,
    /// Bundle timestamp [default: now in live mode, 1970-01-01T00:00:00Z otherwise]
    #[arg(long)]
    timestamp: Option<String>,
    /// Worker threads (0 = one per core)
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Args)]
struct DebugArgs {
    #[command(flatten)]
    llm: LlmArgs,
    /// Explanation bundles written by `explain`
    #[arg(long, value_name = "PATH")]
    bundles: PathBuf,
    /// Output JSONL of debugger reports
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Name of the explained model as shown to the debugger
    #[arg(long, default_value = "lmx-reasoner")]
    target_model: String,
    /// Minimum faithfulness and accuracy score for a reliable verdict
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: u8,
    /// Worker threads (0 = one per core)
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// JSONL dataset with gold answers
    #[arg(long, value_name = "PATH")]
    dataset: PathBuf,
    /// Output of `infer` or `explain`
    #[arg(long, value_name = "PATH")]
    predictions: PathBuf,
    /// Planted paths from `gen-synthetic`, enables reason-element recall
    #[arg(long, value_name = "PATH")]
    planted: Option<PathBuf>,
    /// Reports from `debug`, enables the reliability matrix
    #[arg(long, value_name = "PATH")]
    debug_reports: Option<PathBuf>,
    /// 3-point Likert ratings, whitespace separated
    #[arg(long, value_name = "PATH")]
    likert: Option<PathBuf>,
    /// Reason-elements considered for recall
    #[arg(long, default_value_t = DEFAULT_TOP_W)]
    top_w: usize,
    /// Output JSON report [default: stdout]
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenSyntheticArgs {
    /// Directory for kg.tsv, relations.txt, train/test.jsonl, planted.jsonl
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Training items
    #[arg(long, default_value_t = 500)]
    size: usize,
    /// Held-out items
    #[arg(long, default_value_t = 100)]
    test_size: usize,
    /// Wrong choices per item
    #[arg(long, default_value_t = 3)]
    distractors: usize,
    /// Leaf noise neighbors per concept
    #[arg(long, default_value_t = 3)]
    noise_degree: usize,
}

fn parse() -> Result<Cli, ExitCode> {
    let cmd = config::with_env_vars(Cli::command());
    let args = config::layered_args(&cmd, std::env::args_os().collect(), |k| std::env::var(k).ok()).map_err(
        |f| {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        },
    )?;
    let matches = cmd.try_get_matches_from(args).unwrap_or_else(|e| e.exit());
    Cli::from_arg_matches(&matches).map_err(|e| {
        let _ = e.print();
        ExitCode::from(exit::USAGE)
    })
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(c) => c,
        Err(code) => return code,
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

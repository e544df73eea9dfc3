//! `hybridlm`: train a BPE vocabulary, pretrain a hybrid causal/masked
//! language model, evaluate it and generate text.

mod commands;
mod config;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybridlm::corpus::Ratio;
use hybridlm::eval::EvalMode;

#[derive(Parser)]
#[command(
    name = "hybridlm",
    version,
    about = "Hybrid causal/masked language model pretraining and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level BPE vocabulary on the corpus and write vocab.txt.
    Tokenize(TokenizeArgs),
    /// Pretrain a model; writes checkpoints and metrics.jsonl.
    Train(TrainArgs),
    /// Score evaluation files and write report.json.
    Eval(EvalArgs),
    /// Greedy text generation from a checkpoint.
    Generate(GenerateArgs),
}

#[derive(Args)]
pub struct ConfigArgs {
    /// JSON run configuration; omitted keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set model.hidden_size=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Corpus files (plain text with blank-line separated documents, or JSON lines).
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    /// Random seed; overrides the config and HYBRIDLM_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TokenizeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Target vocabulary size including special and byte tokens.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary file [default: <out>/vocab.txt].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Causal-to-masked sequence ratio, e.g. `1:15`.
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Option<Ratio>,
    /// Continue from a checkpoint directory with its stored configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print progress every N steps (0 disables).
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file [default: vocab.txt next to the checkpoint].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Evaluation files (JSON lines, one item per line).
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// causal, bidirectional (alias masked), prefix or fused.
    #[arg(long, default_value = "bidirectional", value_parser = parse_mode)]
    pub mode: EvalMode,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Pick the temperature by ranked accuracy, optionally from a
    /// comma-separated grid.
    #[arg(long, value_name = "GRID", num_args = 0..=1, default_missing_value = "")]
    pub calibrate_temperature: Option<String>,
    /// Score text items from this fraction of their tokens onward.
    #[arg(long)]
    pub prefix_fraction: Option<f64>,
    /// Where report.json goes [default: the checkpoint's run directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file [default: vocab.txt next to the checkpoint].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Prompt text, or `-` to read it from standard input.
    pub prompt: String,
    /// New-token budget [default: 64, capped by the model's context length].
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Divide positive / multiply negative logits of seen tokens; 1 disables.
    #[arg(long, default_value_t = 1.0)]
    pub repetition_penalty: f64,
    /// Keep decoding past the end-of-sequence token.
    #[arg(long)]
    pub ignore_eos: bool,
    /// Print `{prompt, ids, text, steps}` as JSON.
    #[arg(long)]
    pub json: bool,
}

fn parse_ratio(s: &str) -> Result<Ratio, String> {
    s.parse().map_err(|e: hybridlm::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    s.parse().map_err(|e: hybridlm::Error| e.to_string())
}

/// A failed command with its exit code: 2 for usage and configuration
/// errors, 1 for runtime failures.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<hybridlm::Error> for Failure {
    fn from(e: hybridlm::Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tokenize(a) => commands::tokenize(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Generate(a) => commands::generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

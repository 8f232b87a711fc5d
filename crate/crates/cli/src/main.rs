//! `mannmt`: train, translate with, evaluate and inspect translation models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use mannmt::models::Architecture;

#[derive(Parser, Debug)]
#[command(name = "mannmt", version, about = "Memory-augmented neural machine translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoints, metrics.tsv and config.txt into --out.
    #[command(args_override_self = true)]
    Train(Box<TrainArgs>),
    /// Translate a file, one sentence per line.
    #[command(args_override_self = true)]
    Translate(TranslateArgs),
    /// Score a checkpoint on aligned source and reference files.
    #[command(args_override_self = true)]
    Evaluate(EvaluateArgs),
    /// Decode one sentence and export its attention and memory traces.
    #[command(args_override_self = true)]
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    /// Copy random bit patterns.
    Copy,
    /// Substitute every token through a fixed bijection, then swap adjacent pairs.
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Encoder {
    Bidirectional,
    Unidirectional,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat key=value file of flag values (keys are flag names); flags on the command line win.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Generate a synthetic task instead of reading corpora.
    #[arg(long, value_enum, required_unless_present = "train_source")]
    task: Option<Task>,
    /// Training source, one whitespace-tokenised sentence per line.
    #[arg(long, value_name = "FILE", conflicts_with = "task", requires_all = ["train_target", "valid_source", "valid_target"])]
    train_source: Option<PathBuf>,
    /// Training target, aligned with --train-source.
    #[arg(long, value_name = "FILE")]
    train_target: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    valid_source: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    valid_target: Option<PathBuf>,
    /// Vocabulary size built from the training source, reserved ids included.
    #[arg(long, default_value_t = 10_000)]
    source_vocab_size: usize,
    /// Vocabulary size built from the training target.
    #[arg(long, default_value_t = 10_000)]
    target_vocab_size: usize,

    /// Generated training pairs.
    #[arg(long, default_value_t = 20_000)]
    train_size: usize,
    /// Generated validation pairs.
    #[arg(long, default_value_t = 500)]
    valid_size: usize,
    /// Shortest generated sentence.
    #[arg(long, default_value_t = 1)]
    min_len: usize,
    /// Longest generated sentence.
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Bit width of copy-task patterns.
    #[arg(long, default_value_t = 4)]
    bits: usize,
    /// Content tokens of the toy task.
    #[arg(long, default_value_t = 50)]
    toy_vocab: usize,

    /// baseline, ntm-attention, mad or pure-mann.
    #[arg(long, default_value = "baseline")]
    arch: Architecture,
    #[arg(long, default_value_t = 32)]
    embedding: usize,
    /// LSTM units per layer.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// Memory locations N.
    #[arg(long, default_value_t = 16)]
    memory_locations: usize,
    /// Memory word width W.
    #[arg(long, default_value_t = 16)]
    memory_width: usize,
    #[arg(long, default_value_t = 1)]
    read_heads: usize,
    #[arg(long, default_value_t = 1)]
    write_heads: usize,
    /// Encoder direction; ignored by pure-mann.
    #[arg(long, value_enum, default_value_t = Encoder::Bidirectional)]
    encoder: Encoder,
    #[arg(long, default_value_t = 0.3)]
    dropout: f64,
    /// Parameters start uniform in ±this.
    #[arg(long, default_value_t = 0.1)]
    init_range: f64,

    /// Parameter updates.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_epsilon: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    clip_norm: f64,
    /// Validate every this many updates; 0 validates at epoch ends.
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Validation pairs scored per evaluation; 0 scores all.
    #[arg(long, default_value_t = 0)]
    eval_limit: usize,
    /// Stop once validation token accuracy reaches this; 0 never stops early.
    #[arg(long, default_value_t = 0.0)]
    target_accuracy: f64,

    /// Seeds data generation, initialisation, batching and dropout.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long, short, value_name = "DIR", default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long, default_value_t = 10)]
    beam_width: usize,
    /// Greedy decoding instead of beam search.
    #[arg(long)]
    greedy: bool,
    /// Output length cap; 0 uses twice the source length plus 10.
    #[arg(long, default_value_t = 0)]
    max_output: usize,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    /// Flat key=value file of flag values; flags on the command line win.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Defaults to standard output.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Vocabulary file that must equal the checkpoint's source vocabulary.
    #[arg(long, value_name = "FILE")]
    source_vocab: Option<PathBuf>,
    /// Vocabulary file that must equal the checkpoint's target vocabulary.
    #[arg(long, value_name = "FILE")]
    target_vocab: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Flat key=value file of flag values; flags on the command line win.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    source: PathBuf,
    #[arg(long, value_name = "FILE")]
    reference: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Flat key=value file of flag values; flags on the command line win.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Whitespace-separated source tokens.
    #[arg(long)]
    sentence: String,
    /// Receives one directory per head, report.txt and config.txt.
    #[arg(long, short, value_name = "DIR", default_value = "inspect")]
    out: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
}

fn run() -> mannmt::Result<()> {
    let argv = config::expand(std::env::args_os().collect(), &Cli::command())?;
    let matches = Cli::command().get_matches_from(argv);
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let resolved = config::render(name, &config::resolved(Cli::command().find_subcommand(name).expect("parsed"), sub));
    match cli.command {
        Command::Train(a) => commands::train(&a, &resolved),
        Command::Translate(a) => commands::translate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Inspect(a) => commands::inspect(&a, &resolved),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

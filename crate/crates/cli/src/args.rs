use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hopqg::par::Parallelism;

/// Multi-hop question generation pipeline.
///
/// Exit codes: 0 success, 1 validation or runtime error, 2 configuration
/// error or bad usage.
#[derive(Parser, Debug)]
#[command(name = "hopqg", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check every record of an annotated JSONL file and list violations
    Validate(ValidateArgs),
    /// Drop examples whose question is longer than a word limit
    Filter(FilterArgs),
    /// Reserve a seeded dev split
    Split(SplitArgs),
    /// Dataset statistics as JSON
    Stats(StatsArgs),
    /// Write a templated synthetic corpus
    Synth(SynthArgs),
    /// Train a model, writing checkpoints and a metrics log
    Train(TrainArgs),
    /// Generate questions and supporting facts with one model
    Generate(GenerateArgs),
    /// Generate with a weighted ensemble of two models
    EnsembleGenerate(EnsembleArgs),
    /// Score generated questions against references
    Evaluate(EvaluateArgs),
    /// Dump the context-entity graph of each example
    GraphDump(GraphDumpArgs),
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config file; flags override it, it overrides built-in defaults
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output file or directory
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Annotated JSONL file
    pub input: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    /// Annotated JSONL file
    pub input: PathBuf,
    /// Where to write the retained examples (same as --out)
    pub output: Option<PathBuf>,
    /// Keep questions of at most this many whitespace words
    #[arg(long, value_name = "N")]
    pub max_words: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Annotated JSONL file
    pub input: PathBuf,
    /// Number of dev examples
    #[arg(long, value_name = "N")]
    pub n_dev: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Annotated JSONL file
    pub input: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of examples
    #[arg(long, value_name = "N")]
    pub examples: Option<usize>,
    /// Fraction of examples with a padded long question
    #[arg(long, value_name = "F")]
    pub long_fraction: Option<f64>,
    /// Also write the matching whitespace vocabulary here
    #[arg(long, value_name = "FILE")]
    pub vocab_out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    /// Transformer encoder only
    Te,
    /// Transformer encoder with graph attention
    Gate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Sequential,
    Parallel,
}

impl From<Mode> for Parallelism {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Sequential => Parallelism::Sequential,
            Mode::Parallel => Parallelism::Parallel,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training set (annotated JSONL)
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Dev set used to pick the best checkpoint
    #[arg(long, value_name = "FILE")]
    pub dev: Option<PathBuf>,
    /// Whitespace vocabulary file; built from the training set when absent
    #[arg(long, value_name = "FILE", conflicts_with = "pieces")]
    pub vocab: Option<PathBuf>,
    /// Piece inventory applied by greedy longest match
    #[arg(long, value_name = "FILE")]
    pub pieces: Option<PathBuf>,
    /// Model architecture
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// Training steps
    #[arg(long, value_name = "N")]
    pub max_steps: Option<u64>,
    /// Weight of the supporting-fact loss
    #[arg(long, value_name = "F")]
    pub lambda: Option<f64>,
    /// Multiplier on the learning-rate schedule
    #[arg(long, value_name = "F")]
    pub lr_scale: Option<f64>,
    /// Padded tokens per batch
    #[arg(long, value_name = "N")]
    pub token_budget: Option<usize>,
    /// Train on all questions regardless of length
    #[arg(long)]
    pub no_filter: bool,
    /// Run examples sequentially or on the thread pool
    #[arg(long, value_enum)]
    pub parallelism: Option<Mode>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Default)]
pub struct DecodeArgs {
    /// Beam width; 1 decodes greedily
    #[arg(long, value_name = "N")]
    pub beam_width: Option<usize>,
    /// Longest question in tokens
    #[arg(long, value_name = "N")]
    pub max_len: Option<usize>,
    /// Length-normalization exponent
    #[arg(long, value_name = "F")]
    pub length_alpha: Option<f64>,
    /// Probability above which a sentence is a supporting fact
    #[arg(long, value_name = "F")]
    pub sf_threshold: Option<f64>,
    /// Run examples sequentially or on the thread pool
    #[arg(long, value_enum)]
    pub parallelism: Option<Mode>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Checkpoint stem, e.g. run/best
    #[arg(long, value_name = "STEM")]
    pub checkpoint: PathBuf,
    /// Examples to generate for (annotated JSONL)
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Vocabulary file; defaults to the one next to the checkpoint
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// First checkpoint stem
    #[arg(long, value_name = "STEM")]
    pub a: PathBuf,
    /// Second checkpoint stem
    #[arg(long, value_name = "STEM")]
    pub b: PathBuf,
    /// Weight of the first model
    #[arg(long, value_name = "F")]
    pub alpha: Option<f64>,
    /// Examples to generate for (annotated JSONL)
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Vocabulary file; defaults to the one next to the first checkpoint
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Generation records (JSONL)
    #[arg(long, value_name = "FILE")]
    pub hyp: PathBuf,
    /// Reference examples (annotated JSONL)
    #[arg(long = "ref", value_name = "FILE")]
    pub reference: PathBuf,
    /// Second set of generation records for a per-example GLEU comparison
    #[arg(long, value_name = "FILE")]
    pub compare: Option<PathBuf>,
    /// GLEU gap counted as a win in the comparison
    #[arg(long, value_name = "F")]
    pub margin: Option<f64>,
    /// F-measure beta of ROUGE-L
    #[arg(long, value_name = "F")]
    pub rouge_beta: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct GraphDumpArgs {
    /// Annotated JSONL file
    pub input: PathBuf,
    /// Dump only this example
    #[arg(long, value_name = "ID")]
    pub id: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

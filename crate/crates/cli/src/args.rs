use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Grammar-guided code sketch completion: corpus generation, training,
/// completion and evaluation.
#[derive(Debug, Parser)]
#[command(name = "sketchgen", version)]
pub struct Cli {
    /// Config file (TOML, or JSON with a .json extension). Flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for all randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for example-parallel stages (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus as train/valid/test JSON-Lines files.
    GenCorpus(GenCorpusArgs),
    /// Count the expansion model and train the selector.
    Pretrain(PretrainArgs),
    /// Continue training a grammar model with self-critical updates.
    Finetune(FinetuneArgs),
    /// Train a left-to-right baseline.
    TrainBaseline(BaselineArgs),
    /// Print the top-k sketches for a context.
    Complete(CompleteArgs),
    /// Score predicted sketches against ground truths.
    Score(ScoreArgs),
    /// Evaluate models on a test split and write metrics.csv and buckets.csv.
    Evaluate(EvaluateArgs),
    /// Run the ablation variants and write ablations.csv.
    Ablate(AblateArgs),
    /// Print the greedy generation step by step.
    Trace(TraceArgs),
}

#[derive(Debug, Args)]
pub struct GrammarArg {
    /// Grammar file (default: built-in MiniLang).
    #[arg(long, value_name = "FILE")]
    pub grammar: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    pub grammar: GrammarArg,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of synthetic files.
    #[arg(long)]
    pub files: Option<usize>,
    /// Probability that an identifier or string leaf comes from the file-local pool.
    #[arg(long)]
    pub p_local: Option<f64>,
    /// Context tokens kept before each statement.
    #[arg(long)]
    pub context_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training split.
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Validation split.
    #[arg(long, value_name = "FILE")]
    pub valid: PathBuf,
    /// Where to write the trained model.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Where to write the training log CSV.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Maximum training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Selector step size.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Step size of fractional expansion-count updates.
    #[arg(long)]
    pub expansion_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Validation examples used per validation pass.
    #[arg(long)]
    pub valid_limit: Option<usize>,
    /// Maximum generation steps per completion.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub grammar: GrammarArg,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Context tokens the model conditions on.
    #[arg(long)]
    pub context_len: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Selector,
    Full,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretrained model.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Which parameters move.
    #[arg(long, value_enum, default_value = "full")]
    pub mode: Mode,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Variant {
    Ltr,
    LtrStop,
    LtrHole,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub grammar: GrammarArg,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum)]
    pub variant: Variant,
    /// Per-node hole probability for the hole dataset.
    #[arg(long)]
    pub p_hole: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BeamArgs {
    /// Beam width.
    #[arg(short, long)]
    pub k: Option<usize>,
    /// Expansions kept per position.
    #[arg(short, long)]
    pub n: Option<usize>,
    /// Positions tried per candidate (default: all).
    #[arg(short, long)]
    pub m: Option<usize>,
    /// Maximum generation steps per completion.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ContextArgs {
    /// Model file.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Context code, tokenized with the grammar.
    #[arg(long, conflicts_with = "context_file")]
    pub context: Option<String>,
    /// File holding the context code.
    #[arg(long, value_name = "FILE")]
    pub context_file: Option<PathBuf>,
    #[command(flatten)]
    pub grammar: GrammarArg,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    #[command(flatten)]
    pub input: ContextArgs,
    #[command(flatten)]
    pub beam: BeamArgs,
    /// Also print the greedy generation step by step.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub input: ContextArgs,
    /// Maximum generation steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Predictions: one token array (or {"sketch": [...]}) per line; "■" marks a hole.
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    /// Ground truths: one token array (or corpus record) per line.
    #[arg(long, value_name = "FILE")]
    pub gold: PathBuf,
    /// Output CSV (default: stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model files; each is reported under its file stem.
    #[arg(long = "model", value_name = "FILE", required = true)]
    pub models: Vec<PathBuf>,
    /// Test split.
    #[arg(long, value_name = "FILE")]
    pub test: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Ground-truth length bucket edges, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub bucket_edges: Option<Vec<usize>>,
    #[command(flatten)]
    pub beam: BeamArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Pretrained model (before fine-tuning).
    #[arg(long, value_name = "FILE")]
    pub pretrained: PathBuf,
    /// Fine-tuned model.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub valid: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub test: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Candidate stopping thresholds, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub taus: Option<Vec<f64>>,
    /// Maximum epochs for the reward-variant fine-tuning runs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub beam: BeamArgs,
}

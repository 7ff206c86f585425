//! `entailkit` command line: synthetic corpora, classifier training, corpus
//! revision, retrieval training, evaluation, statistics and gradient checks.
//!
//! Exit status is 0 on success, 1 on usage or validation errors and 2 on
//! internal failures.

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use entailkit::datapipe::Split;

#[derive(Debug, Parser)]
#[command(name = "entailkit", version, about = "Multi-modal entailment and entailment-enhanced retrieval")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic planted-cluster corpus and its oracle.
    Synth(SynthArgs),
    /// Train the multi-modal entailment classifier.
    TrainEntail(TrainEntailArgs),
    /// Add entailed candidates to a corpus as weak edges.
    Revise(ReviseArgs),
    /// Train the dual-encoder retrieval model.
    TrainRetrieval(TrainRetrievalArgs),
    /// Rank every caption of a corpus for every image with a retrieval model.
    Rank(RankArgs),
    /// Score a ranked run (and optionally an audit file).
    Eval(EvalArgs),
    /// Many-to-many matching statistics of a corpus.
    Stats(StatsArgs),
    /// Finite-difference check of the classifier gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for corpus.jsonl, images/ and oracle.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    images_per_cluster: Option<usize>,
    #[arg(long)]
    captions_per_image: Option<usize>,
    /// Half-width of the uniform pixel noise.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainEntailArgs {
    /// Training corpus manifest.
    #[arg(long)]
    corpus: PathBuf,
    /// Oracle labelling the training pairs.
    #[arg(long)]
    oracle: PathBuf,
    /// Output directory for model.ckpt, model.json, train_log.jsonl, report.json.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training examples per task form.
    #[arg(long)]
    per_form: Option<usize>,
    /// Share of training negatives chosen for word overlap with the premise.
    #[arg(long)]
    hard_negatives: Option<f64>,
    /// Disable attention-guided masking.
    #[arg(long)]
    no_mask: bool,
    /// Held-out corpus scored in image-text-text form after training.
    #[arg(long, requires = "heldout_oracle")]
    heldout_corpus: Option<PathBuf>,
    #[arg(long, requires = "heldout_corpus")]
    heldout_oracle: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    heldout_size: usize,
    /// Share of held-out negatives chosen for word overlap with the premise.
    #[arg(long, default_value_t = 0.0)]
    heldout_hard_fraction: f64,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("classifier").required(true).args(["model", "oracle"])))]
pub struct ReviseArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Ranked run over the corpus used to sample candidates.
    #[arg(long)]
    run: PathBuf,
    /// Directory written by `train-entail`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Use an oracle file as the classifier instead of a model.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Output directory for the revised corpus and the audit files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    k: usize,
    /// Candidates sampled per image from its top-k list.
    #[arg(long, default_value_t = 1)]
    per_image: usize,
    #[arg(long, default_value_t = 0.1)]
    random_fraction: f64,
    /// Fraction of images that receive top-k candidates.
    #[arg(long, default_value_t = 1.0)]
    image_fraction: f64,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainRetrievalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for retrieval.ckpt, retrieval.json, train_log.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Negative filtering plus weak-positive batches.
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    strategy: OnOff,
    /// Learning-rate factor of weak batches (default 0.3).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Directory written by `train-retrieval`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Run file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ranked run to score.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for report.json, metrics.csv, metrics.txt, metrics.svg.
    #[arg(long)]
    out: PathBuf,
    /// Entailment relation from a synthetic oracle.
    #[arg(long, conflicts_with = "edges")]
    oracle: Option<PathBuf>,
    /// Entailment relation from a weak-edge file (manifest format).
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Minimum p_entail for an edge in `--edges`.
    #[arg(long, default_value_t = 0.5)]
    min_p: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5, 10])]
    ks: Vec<usize>,
    /// Audit file from `revise`, scored against `--oracle`.
    #[arg(long, requires = "oracle")]
    audit: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Write the statistics here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// First seed of the range.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Components sampled per parameter tensor.
    #[arg(long, default_value_t = 16)]
    per_tensor: usize,
    /// Also write a JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::TrainEntail(a) => commands::train_entail(a),
        Command::Revise(a) => commands::revise(a),
        Command::TrainRetrieval(a) => commands::train_retrieval(a),
        Command::Rank(a) => commands::rank(a),
        Command::Eval(a) => commands::eval(a),
        Command::Stats(a) => commands::stats(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

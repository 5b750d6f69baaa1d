//! `plgt`: build vocabularies, train, translate, evaluate, inspect and
//! compare power-law graph attention models.

mod commands;
mod fail;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use run_config::TableRow;

#[derive(Parser, Debug)]
#[command(name = "plgt", version, about = "Power-law graph attention encoder-decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a subword vocabulary from one side of a tab-separated corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a model and write checkpoints, vocabularies and the epoch log.
    Train(TrainArgs),
    /// Translate one sentence per line.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate(EvaluateArgs),
    /// Export per-head attention tensors for one sentence as CSV and SVG.
    Inspect(InspectArgs),
    /// Score two checkpoints on one test set and show their training logs.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct BuildVocabArgs {
    /// Tab-separated `source<TAB>target` corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// `src` or `tgt`.
    #[arg(long, default_value = "src")]
    pub side: String,
    /// Maximum vocabulary size, specials included.
    #[arg(long, default_value_t = 8000)]
    pub cap: usize,
    /// Stop merging once the best pair occurs fewer times than this.
    #[arg(long, default_value_t = 2)]
    pub min_freq: usize,
    /// Lowercase before learning merges.
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding `train.tsv` and optionally `dev.tsv`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, vocabularies and the log.
    #[arg(long)]
    pub out: PathBuf,
    /// `plga` or `sdpa`.
    #[arg(long)]
    pub attention: Option<String>,
    /// Published hyperparameter row: 1-6, or `sdpa` for the baseline.
    #[arg(long)]
    pub table1_row: Option<TableRow>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    /// Also keep a checkpoint every N epochs.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Use this source vocabulary instead of learning one.
    #[arg(long)]
    pub src_vocab: Option<PathBuf>,
    /// Use this target vocabulary instead of learning one.
    #[arg(long)]
    pub tgt_vocab: Option<PathBuf>,
    /// Continue from a checkpoint; its echoed config wins over everything
    /// except `--epochs`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Extra `key=value` config overrides (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print the resolved config and exit without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// One source sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Beam width; 1 is greedy. Defaults to the checkpoint's setting.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Length-normalisation exponent.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub sentence: String,
    #[arg(long)]
    pub outdir: PathBuf,
    /// `gray` or `viridis`.
    #[arg(long, default_value = "gray")]
    pub colormap: String,
    /// Histogram bins.
    #[arg(long, default_value_t = plgt_core::inspect::DEFAULT_BINS)]
    pub bins: usize,
    /// Heatmap cell size in pixels.
    #[arg(long, default_value_t = 16.0)]
    pub cell: f64,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub ckpt_a: PathBuf,
    #[arg(long)]
    pub ckpt_b: PathBuf,
    /// Tab-separated `source<TAB>reference` pairs.
    #[arg(long)]
    pub testset: PathBuf,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildVocab(a) => commands::build_vocab(&a),
        Command::Train(a) => commands::train(&a),
        Command::Translate(a) => commands::translate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::Compare(a) => commands::compare(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("plgt: {f}");
            ExitCode::from(f.code)
        }
    }
}

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "urag", version, about = "Span-uncertainty contrastive retrieval pipeline")]
pub struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root seed; overrides the config and re-derives unpinned stage seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the planted-topic synthetic corpus.
    Synth(SynthArgs),
    /// Split documents into fixed-size word chunks.
    Chunk(ChunkArgs),
    /// Build the BM25 index over chunks.
    Index(IndexArgs),
    /// Score (anchor, candidate) pairs with span uncertainty.
    ScorePairs(ScorePairsArgs),
    /// Cluster, sample and score to produce training triplets.
    BuildDataset(BuildDatasetArgs),
    /// Train the encoder on triplets.
    Train(TrainArgs),
    /// Embed every chunk with a trained encoder.
    EmbedIndex(EmbedIndexArgs),
    /// Retrieve the top chunks for a query and assemble the prompt.
    Retrieve(RetrieveArgs),
    /// Alignment, uniformity and RSA; optionally a calibration tau sweep.
    Eval(EvalArgs),
    /// Uncertainty calibration AUROC over QA records.
    Calibrate(CalibrateArgs),
}

#[derive(Args, Debug)]
pub struct Resume {
    /// Skip the stage when its output already exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value = "corpus.jsonl")]
    pub out: PathBuf,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub docs_per_topic: Option<usize>,
    #[arg(long)]
    pub words_per_doc: Option<usize>,
    #[command(flatten)]
    pub resume: Resume,
}

#[derive(Args, Debug)]
pub struct ChunkArgs {
    /// Corpus file or directory; repeatable. Falls back to `corpus.paths`.
    #[arg(long = "in")]
    pub inputs: Vec<PathBuf>,
    /// `jsonl` or `plain_dir`.
    #[arg(long)]
    pub format: Option<String>,
    /// Words per chunk.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value = "chunks.jsonl")]
    pub out: PathBuf,
    #[command(flatten)]
    pub resume: Resume,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long, default_value = "chunks.jsonl")]
    pub chunks: PathBuf,
    #[arg(long, default_value = "bm25.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[command(flatten)]
    pub resume: Resume,
}

#[derive(Args, Debug)]
pub struct ScorePairsArgs {
    #[arg(long, default_value = "chunks.jsonl")]
    pub chunks: PathBuf,
    /// JSONL of `{"anchor_id": …, "candidate_id": …}`.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value = "scores.jsonl")]
    pub out: PathBuf,
    /// `snr_span`, `all_chunking` or `precise_chunking`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Also write the per-window SNR trace of every pair here (JSONL).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub resume: Resume,
}

#[derive(Args, Debug)]
pub struct BuildDatasetArgs {
    #[arg(long, default_value = "chunks.jsonl")]
    pub chunks: PathBuf,
    #[arg(long, default_value = "bm25.json")]
    pub index: PathBuf,
    #[arg(long, default_value = "triplets.jsonl")]
    pub out: PathBuf,
    /// Append-only log of scored pairs, reused across runs.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub anchors_per_cluster: Option<usize>,
    /// Validate the configuration and inputs only; no provider calls.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub resume: Resume,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value = "chunks.jsonl")]
    pub chunks: PathBuf,
    #[arg(long, default_value = "triplets.jsonl")]
    pub triplets: PathBuf,
    #[arg(long, default_value = "model.bin")]
    pub out: PathBuf,
    /// Training report (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[command(flatten)]
    pub resume: Resume,
}

#[derive(Args, Debug)]
pub struct EmbedIndexArgs {
    #[arg(long, default_value = "model.bin")]
    pub model: PathBuf,
    #[arg(long, default_value = "chunks.jsonl")]
    pub chunks: PathBuf,
    #[arg(long, default_value = "embed.idx")]
    pub out: PathBuf,
    #[command(flatten)]
    pub resume: Resume,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long, default_value = "model.bin")]
    pub model: PathBuf,
    #[arg(long, default_value = "embed.idx")]
    pub index: PathBuf,
    #[arg(long, default_value = "chunks.jsonl")]
    pub chunks: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub m: Option<usize>,
    /// `multihop_qa`, `trec`, `samsum` or `triviaqa`.
    #[arg(long)]
    pub task: Option<String>,
    /// Template file overriding the bundled one.
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, default_value = "model.bin")]
    pub model: PathBuf,
    #[arg(long, default_value = "chunks.jsonl")]
    pub chunks: PathBuf,
    /// Anchor/positive pairs for alignment.
    #[arg(long, default_value = "triplets.jsonl")]
    pub triplets: PathBuf,
    /// Reference encoder for RSA.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value = "eval.json")]
    pub out: PathBuf,
    /// QA records for the calibration tau sweep.
    #[arg(long)]
    pub qa: Option<PathBuf>,
    #[arg(long, default_value = "tau_sweep.csv")]
    pub tau_csv: PathBuf,
    #[command(flatten)]
    pub resume: Resume,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub qa: PathBuf,
    #[arg(long, default_value = "calibration.json")]
    pub out: PathBuf,
    /// `snr_span` or a baseline: `minimum`, `average`, `log_sum`, `entropy`, `self_information`.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Score over the whole prompt+answer stream instead of the answer suffix.
    #[arg(long)]
    pub full_stream: bool,
    /// Also write the tau sweep CSV.
    #[arg(long)]
    pub tau_csv: Option<PathBuf>,
    #[command(flatten)]
    pub resume: Resume,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

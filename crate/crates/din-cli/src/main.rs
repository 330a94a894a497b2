//! `din` — train, score, and evaluate a low-complexity deepfake-speech
//! detector from the command line.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error,
//! 4 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "din",
    version,
    about = "Deepfake-speech detection: feature extraction, two-stage training, \
             Gaussian scoring, and evaluation"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract feature tensors for every manifest utterance.
    Extract(ExtractArgs),
    /// Run stage-1 / stage-2 training on cached features.
    Train(TrainArgs),
    /// Fit the bonafide Gaussian on a manifest's bonafide utterances.
    FitGaussian(FitGaussianArgs),
    /// Score a manifest: Mahalanobis distance per utterance.
    Score(ScoreArgs),
    /// Compute EER/AUC/accuracy/F1 from a scores file.
    Evaluate(EvaluateArgs),
    /// Write one embedding vector per utterance (for external analysis).
    ExportEmbeddings(ExportArgs),
    /// Report parameter and FLOP counts for the configured network.
    Count(CountArgs),
    /// Generate the synthetic three-class dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    config: PathBuf,
    /// CM protocol file naming the utterances.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory receiving one `<utt_id>.dinf` cache per utterance.
    #[arg(long)]
    out: PathBuf,
    /// Override the WAV directory (default: the config's wav_dir).
    #[arg(long)]
    wav_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Which stage to run: 1, 2, or all.
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Warm-start weights from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FitGaussianArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Stats file to write (default: the config's stats_path).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    wav_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AggregateArg {
    Mean,
    Max,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Gaussian stats file from `fit-gaussian`.
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Scores file to write (default: the config's scores_path).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    wav_dir: Option<PathBuf>,
    /// Segment-to-utterance aggregation.
    #[arg(long, value_enum, default_value = "mean")]
    aggregate: AggregateArg,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Decision threshold for accuracy/F1.
    #[arg(long, conflicts_with = "calibrate")]
    threshold: Option<f64>,
    /// Calibrate the threshold at this dev scores file's EER point.
    #[arg(long)]
    calibrate: Option<PathBuf>,
    /// Also write the report as pretty-printed JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output file: `utt_id` plus D tab-separated floats per line.
    #[arg(long)]
    out: PathBuf,
    /// Optional run config (frontend settings and wav_dir).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    wav_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic dataset spec (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory (WAVs under `<out>/wav`, protocols in `<out>`).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global()
        {
            eprintln!("error: cannot configure {threads} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Extract(args) => commands::extract(args),
        Command::Train(args) => commands::train(args),
        Command::FitGaussian(args) => commands::fit_gaussian(args),
        Command::Score(args) => commands::score(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::ExportEmbeddings(args) => commands::export_embeddings(args),
        Command::Count(args) => commands::count(args),
        Command::Synth(args) => commands::synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

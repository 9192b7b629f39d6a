//! `drp`: synthesize data, train both stages, evaluate, inspect checkpoints,
//! recommend drugs for one profile, or run the HTTP service.
//!
//! Exit codes: 0 success, 2 usage, 3 validation, 4 runtime.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "drp",
    version,
    about = "Drug response prediction and treatment recommendation"
)]
struct Cli {
    /// Increase log verbosity (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a planted signal.
    Synth(SynthArgs),
    /// Stage 1: pretrain the encoder and survival head.
    Pretrain(PretrainArgs),
    /// Stage 2: joint RECIST, cell-line and survival training.
    Train(TrainArgs),
    /// Compute metrics for a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Rank the catalog for one mutation profile.
    Recommend(RecommendArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Summarize and verify a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Planted-signal strength; 0 makes labels independent of features.
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long)]
    panel_size: Option<usize>,
    #[arg(long)]
    pairs_per_gene: Option<usize>,
    #[arg(long)]
    drugs: Option<usize>,
    #[arg(long)]
    recist: Option<usize>,
    #[arg(long)]
    cellline: Option<usize>,
    /// Records in each survival cohort.
    #[arg(long)]
    survival: Option<usize>,
    /// Profiles in the unlabeled reference cohort.
    #[arg(long)]
    cohort_size: Option<usize>,
    /// Manifest path (default: <out>/run.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
struct TrainCommon {
    /// Directory produced by `drp synth` (or laid out the same way).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Early stopping after this many epochs without improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Stop once the validation metric reaches this value.
    #[arg(long)]
    target_metric: Option<f64>,
    /// Model width d.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// Seed of the 64/16/20 train/val/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Manifest path (default: <out>/run.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SurvivalCohort {
    Crc,
    Nsclc,
    Both,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: TrainCommon,
    /// Survival cohorts to pretrain on.
    #[arg(long, value_enum, default_value_t = SurvivalCohort::Crc)]
    cohort: SurvivalCohort,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainCommon,
    /// Stage-1 checkpoint to fine-tune.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Start from random weights instead of a pretrained checkpoint.
    #[arg(long)]
    no_pretrain: bool,
    /// Drop the cell-line AUDRC loss.
    #[arg(long)]
    no_cellline: bool,
    /// Drop the survival loss.
    #[arg(long)]
    no_survival: bool,
    /// Keep encoder weights fixed.
    #[arg(long)]
    freeze_encoder: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalDataset {
    Recist,
    SurvivalCrc,
    SurvivalNsclc,
    Cellline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalDataset::Recist)]
    dataset: EvalDataset,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Manifest path (default: ./drp-eval.manifest.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RecommendArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    /// Profile document, JSON or TSV (chosen by extension).
    #[arg(long)]
    profile: PathBuf,
    /// Reference cohort profile file for z-scores.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    cancer_type: Option<String>,
    #[arg(long, default_value_t = drp_core::recommender::DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = drp_core::recommender::DEFAULT_DISPERSION_THRESHOLD)]
    dispersion_threshold: f64,
    /// Write the full response (boxplot summaries, swarm scores) here.
    #[arg(long)]
    plot_data: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    /// Manifest path (default: ./drp-recommend.manifest.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Service TOML config; DRP_* environment variables override it.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    json: bool,
}

fn main() {
    let cli = Cli::parse();
    let default_level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Recommend(a) => commands::recommend(a),
        Command::Serve(a) => commands::serve(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    if let Err(f) = result {
        eprintln!("error: {:#}", f.error);
        std::process::exit(f.code);
    }
}

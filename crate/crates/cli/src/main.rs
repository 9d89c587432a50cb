//! `tiedrank`: synthesize data, train, evaluate, gradient-check and ablate
//! tied-layer audio/text retrieval models.

mod commands;
mod exit;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "tiedrank", version, about = "Tied-layer cross-modal audio retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset and its train/val split.
    Synth(SynthArgs),
    /// Train a model; writes manifest, best checkpoint, history and report.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every op and the full model loss.
    Gradcheck(GradcheckArgs),
    /// Train one model per grid cell and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, required_unless_present = "from_manifest")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_audio: u64,
    /// Captions per audio item.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub captions: u64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub d_audio: u64,
    #[arg(long, default_value_t = 24, value_parser = clap::value_parser!(u64).range(1..))]
    pub d_text: u64,
    #[arg(long, default_value_t = 2)]
    pub min_len: usize,
    #[arg(long, default_value_t = 6)]
    pub max_len: usize,
    /// Gaussian noise σ added to every frame.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use identity maps from the latent (needs --d-audio == --d-text).
    #[arg(long)]
    pub identity_maps: bool,
    /// Fraction of audio items (with their captions) held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, conflicts_with_all = ["n_audio", "captions", "d_audio", "d_text", "noise", "seed"])]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NegativesArg {
    All,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Transformer,
    Linear,
}

/// Hyperparameters shared by `train` and `ablate`.
#[derive(Args, Debug, Clone)]
pub struct Hyper {
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 150)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 5)]
    pub plateau_patience: usize,
    #[arg(long, default_value_t = 0.1)]
    pub plateau_factor: f64,
    #[arg(long, default_value_t = 15)]
    pub early_stop_patience: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Architecture preset: `<layers>L<d_model><T|L>`, e.g. 2L192T, 4L96T, 2L192L.
    #[arg(long, default_value = "2L192T")]
    pub preset: String,
    /// Override the preset's stack kind.
    #[arg(long, value_enum)]
    pub tied_kind: Option<KindArg>,
    /// Separate stacks per modality.
    #[arg(long)]
    pub untied: bool,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub contrastive_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub learned_positions: bool,
    /// Drop the contrastive term from the loss.
    #[arg(long)]
    pub no_contrastive: bool,
    /// Drop the ranking term from the loss.
    #[arg(long)]
    pub no_ranking: bool,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    #[arg(long, value_enum, default_value_t = NegativesArg::All)]
    pub negatives: NegativesArg,
    /// Caption anchors only in the ranking loss.
    #[arg(long)]
    pub unidirectional: bool,
    /// Train identity-initialised input maps as a stand-in for encoder finetuning.
    #[arg(long)]
    pub trainable_embeddings: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "from_manifest")]
    pub train: Option<PathBuf>,
    #[arg(long, required_unless_present = "from_manifest")]
    pub val: Option<PathBuf>,
    /// Output directory (defaults to the manifest's when re-running).
    #[arg(long, required_unless_present = "from_manifest")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: Hyper,
    /// Re-run exactly the configuration recorded in a manifest.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
    /// No per-epoch progress lines.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "from_manifest")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "from_manifest")]
    pub data: Option<PathBuf>,
    /// Write manifest.json and report.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training manifest the checkpoint must match.
    #[arg(long)]
    pub expect: Option<PathBuf>,
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check only these ops (skips the full-model check).
    #[arg(long, value_name = "OP")]
    pub only: Vec<String>,
    /// Debug hook: negate the backward rule of one op.
    #[arg(long, value_name = "OP")]
    pub inject_wrong_sign: Option<String>,
    /// Random inputs per op.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Write the per-group results as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, required_unless_present = "from_manifest")]
    pub train: Option<PathBuf>,
    #[arg(long, required_unless_present = "from_manifest")]
    pub val: Option<PathBuf>,
    #[arg(long, required_unless_present = "from_manifest")]
    pub out: Option<PathBuf>,
    /// Grid axis (repeatable): contrastive, trainable, tied-kind, tied. Default: all four.
    #[arg(long = "axis", value_name = "AXIS")]
    pub axes: Vec<String>,
    #[command(flatten)]
    pub hyper: Hyper,
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
}

fn set_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("TIEDRANK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| exit::usage(format!("TIEDRANK_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = set_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
    });
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e) as u8)
        }
    }
}

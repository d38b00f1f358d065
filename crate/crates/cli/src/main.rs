mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::config::EvalSplit;

/// Train, cross-validate and explain the dementia MRI classifier.
#[derive(Parser, Debug)]
#[command(name = "demenscan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a stratified split and write checkpoint, metrics and config.
    Train(TrainArgs),
    /// Evaluate a checkpoint: accuracy, loss, confusion matrix.
    Evaluate(EvaluateArgs),
    /// Stratified K-fold cross-validation with a fresh model per fold.
    Kfold(KFoldArgs),
    /// Classify one image and write its saliency map and feature maps.
    Explain(ExplainArgs),
    /// Render the weight planes of the first filters of a conv layer.
    Filters(FiltersArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// Corpus directory (class-per-directory layout) or a JSON manifest.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for every output of the run.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f32>,
    /// Square input side; images are resized to it.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Conv filter counts, e.g. `32,64,128,64`.
    #[arg(long, value_delimiter = ',')]
    pub filters: Option<Vec<usize>>,
    /// Hidden dense widths, e.g. `256,128`.
    #[arg(long, value_delimiter = ',')]
    pub fc_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub dropout: Option<f32>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Checkpoint path (default `<out-dir>/model.ckpt`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Which part of the corpus to evaluate.
    #[arg(long, value_enum)]
    split: Option<EvalSplit>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct KFoldArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Saliency target class (0..3); defaults to the prediction.
    #[arg(long)]
    class: Option<usize>,
    /// Feature maps written per conv layer.
    #[arg(long)]
    maps: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FiltersArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    /// Pixels per weight in the rendered images.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Exit 2: bad flags or configuration. Exit 1: anything failing at runtime.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<demenscan::Error> for Failure {
    fn from(e: demenscan::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn configure_threads() {
    let threads = std::env::var("DEMENSCAN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let name = match &cli.command {
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Kfold(_) => "kfold",
        Command::Explain(_) => "explain",
        Command::Filters(_) => "filters",
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a.flags, a.out),
        Command::Evaluate(a) => commands::evaluate(commands::EvaluateFlags {
            model: a.model,
            data_dir: a.data_dir,
            config: a.config,
            out_dir: a.out_dir,
            split: a.split,
            seed: a.seed,
            train_fraction: a.train_fraction,
        }),
        Command::Kfold(a) => commands::kfold(a.flags, a.folds),
        Command::Explain(a) => commands::explain(commands::ExplainFlags {
            model: a.model,
            image: a.image,
            class: a.class,
            maps: a.maps,
            config: a.config,
            out_dir: a.out_dir,
        }),
        Command::Filters(a) => commands::filters(commands::FiltersFlags {
            model: a.model,
            layer: a.layer,
            count: a.count,
            scale: a.scale,
            config: a.config,
            out_dir: a.out_dir,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let mut cmd = Cli::command();
            let usage = cmd
                .find_subcommand_mut(name)
                .map(|c| c.render_usage())
                .unwrap_or_else(|| cmd.render_usage());
            eprintln!("{usage}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

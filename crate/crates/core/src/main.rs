mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfekit::network::ArchVariant;

#[derive(Parser, Debug)]
#[command(name = "cfekit", version, about = "Train and evaluate CFE single-shot detectors on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON configuration (scene spec for `gen`, architecture otherwise).
    #[arg(long, alias = "spec")]
    pub config: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<ArchVariant, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = ArchVariant::ALL.iter().map(|v| v.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with 7:1:2 train/val/test splits.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
    },
    /// Train a detector on one split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<ArchVariant>,
        /// Training schedule JSON.
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Channel widths of the three taps, e.g. `16,32,64`.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
    },
    /// Evaluate a trained model, or a detections file, on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        infer: InferArgs,
        #[arg(long, value_parser = ["coco", "bdd70"], default_value = "coco")]
        iou_mode: String,
        /// Score an existing detections file instead of running a model.
        #[arg(long, conflicts_with = "weights")]
        detections: Option<PathBuf>,
        /// Count categories without ground truth as AP 0.
        #[arg(long)]
        include_empty_categories: bool,
    },
    /// Write detections for every image of a split.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        infer: InferArgs,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = cfekit::gradcheck::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = cfekit::gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Time inference of every variant and count multiply-accumulates.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        input_size: usize,
        #[arg(long, default_value_t = 20)]
        iterations: usize,
    },
}

#[derive(Args, Debug, Clone)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Weights file written by `train`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Architecture JSON; defaults to `arch.json` next to the weights.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Inference scales, e.g. `0.75,1.0,1.5`.
    #[arg(long, value_delimiter = ',')]
    pub multiscale: Option<Vec<f64>>,
    #[arg(long)]
    pub score_threshold: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !out.contains(&text) {
            out = format!("{out}: {text}");
        }
    }
    out
}

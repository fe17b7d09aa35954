//! Command-line surface for the flow-prediction pipeline.
//!
//! Exit codes: 0 success, 2 usage or validation problem, 3 numeric failure
//! during training or inference.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use flowcast::FlowError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "flowcast", version, about = "Origin-constrained commuting-flow prediction")]
pub struct Cli {
    /// flat key=value config file; flags override it
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// master seed for all randomness
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// output directory (created if absent)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// coordinate mode: planar | geodesic
    #[arg(long, global = true)]
    pub crs: Option<String>,
    /// worker-thread cap for the parallel build
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)] // parsed once, never stored in bulk
pub enum Cmd {
    /// Generate a synthetic city (regions.csv, flows.csv, ground_truth.txt)
    Synth(SynthArgs),
    /// Partition origins into train/val/test (split.csv)
    Split(SplitArgs),
    /// Train the neural model (model.ckpt, training_log.csv)
    Train(TrainArgs),
    /// Evaluate a checkpoint (predictions.csv, reports.csv row)
    Eval(EvalArgs),
    /// Run a classical baseline (predictions.csv, reports.csv row)
    Baseline(BaselineArgs),
    /// Export explainability artifacts
    Explain(ExplainArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_regions: Option<usize>,
    #[arg(long)]
    pub extent_m: Option<f64>,
    #[arg(long)]
    pub mass_exponent: Option<f64>,
    #[arg(long)]
    pub base_decay: Option<f64>,
    #[arg(long)]
    pub anisotropy: Option<f64>,
    #[arg(long)]
    pub anisotropy_axis: Option<f64>,
    #[arg(long)]
    pub mean_outflow: Option<f64>,
}

#[derive(Args)]
pub struct SplitArgs {
    /// directory holding regions.csv and flows.csv
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub train_ratio: Option<f64>,
    #[arg(long)]
    pub val_ratio: Option<f64>,
    #[arg(long)]
    pub test_ratio: Option<f64>,
}

#[derive(Args, Clone)]
pub struct ModelFlags {
    #[arg(long)]
    pub d_geo: Option<usize>,
    #[arg(long)]
    pub d_loc: Option<usize>,
    #[arg(long)]
    pub n_scales: Option<usize>,
    #[arg(long)]
    pub lambda_min: Option<f64>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub ffn_hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// location-encoder variant: rle | rle_prime | none
    #[arg(long)]
    pub variant: Option<String>,
    /// predictor variant: transformer | feedforward_only
    #[arg(long)]
    pub predictor: Option<String>,
    #[arg(long)]
    pub max_destinations: Option<usize>,
    /// apply the optional 1/sqrt(d_k) attention temperature
    #[arg(long)]
    pub scaled_attention: Option<bool>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// split manifest produced by `split`
    #[arg(long)]
    pub split: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub rmsprop_alpha: Option<f64>,
    #[arg(long)]
    pub rmsprop_eps: Option<f64>,
    #[arg(long)]
    pub batch_origins: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// which origin set to score: train | val | test
    #[arg(long, default_value = "test")]
    pub split_name: String,
    /// model label in the report row; defaults to nn_<variant>
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// gravity | radiation
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value = "test")]
    pub split_name: String,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// also render SVG heatmaps
    #[arg(long)]
    pub svg: bool,
    #[command(subcommand)]
    pub what: ExplainCmd,
}

#[derive(Subcommand)]
pub enum ExplainCmd {
    /// Flow-to-flow attention map for one origin
    Attention {
        #[arg(long)]
        origin: String,
    },
    /// Cluster the relative-location embedding over a spatial grid
    Clusters {
        #[arg(long)]
        grid_n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Residual grid over relative locations; optionally a model-vs-model diff
    Residuals {
        /// split manifest; residuals are computed on its test origins
        #[arg(long)]
        split: PathBuf,
        /// second checkpoint: export residuals(A) - residuals(B)
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        cell_size: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numeric = err
                .chain()
                .any(|c| matches!(c.downcast_ref::<FlowError>(), Some(FlowError::Numeric(_))));
            if numeric {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

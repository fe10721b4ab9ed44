//! `danet` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Train, evaluate and inspect toy-scale depth estimation models.
#[derive(Debug, Parser)]
#[command(name = "danet", version, about)]
struct Cli {
    /// Directory for checkpoints, logs and reports.
    #[arg(long, global = true, env = "DANET_OUT_DIR", default_value = "danet-out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run two-stage training and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export prediction, error map and histogram overlay for one sample.
    Diagnose(DiagnoseArgs),
    /// Write synthetic RGB-D pairs and a manifest.
    GenData(GenDataArgs),
}

/// Dataset selection shared by the subcommands.
#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Read samples from a manifest instead of generating them.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of synthetic samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Seed of the synthetic scenes.
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML training configuration; flags below override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint (its configuration is used).
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    global_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    num_bins: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Baseline network: FCB bottleneck and uniform bins instead of the transformer.
    #[arg(long)]
    no_pst: bool,
    #[arg(long)]
    no_augment: bool,
    /// Clear Adam moments when the global stage starts.
    #[arg(long)]
    reset_moments: bool,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Histogram bins of the drift report.
    #[arg(long, default_value_t = danet::metrics::DEFAULT_HISTOGRAM_BINS)]
    bins: usize,
    /// Debug: score the ground truth against itself.
    #[arg(long)]
    gt_passthrough: bool,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample index in the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = danet::metrics::DEFAULT_HISTOGRAM_BINS)]
    bins: usize,
    /// Debug: use the ground truth as the prediction.
    #[arg(long)]
    gt_passthrough: bool,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0.0)]
    d_min: f64,
    #[arg(long, default_value_t = 10.0)]
    d_max: f64,
    /// Meters per stored depth unit.
    #[arg(long, default_value_t = 1e-3)]
    scale: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&cli.out_dir, a),
        Command::Eval(a) => commands::eval(&cli.out_dir, a),
        Command::Diagnose(a) => commands::diagnose(&cli.out_dir, a),
        Command::GenData(a) => commands::gen_data(&cli.out_dir, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

//! `dualscan` command line: synth, train, detect, eval, bench, info.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualscan::model::Fusion;

mod commands;

/// Log level comes from `DUALSCAN_LOG` (default `info`).
#[derive(Parser, Debug)]
#[command(name = "dualscan", version, about = "Selective-scan hyperspectral anomaly detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene and its ground-truth mask.
    Synth(SynthArgs),
    /// Train a model on a cube.
    Train(TrainArgs),
    /// Score every pixel of a cube.
    Detect(DetectArgs),
    /// ROC and AUC of a score map against a mask.
    Eval(EvalArgs),
    /// Time the scan against quadratic attention.
    Bench(BenchArgs),
    /// Parameter count, FLOP estimate and the resolved config as JSON.
    Info(InfoArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON run configuration with `model`, `train`, `mask` and `scene` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `model.fusion`.
    #[arg(long)]
    fusion: Option<Fusion>,
    /// Overrides `scene.seed`, `train.seed` and `model.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Cube path; the mask goes next to it as `<stem>.mask.hsic`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Checkpoint path.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Loss history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    cube: PathBuf,
    /// Trained checkpoint.
    #[arg(long, conflicts_with = "rx", required_unless_present = "rx")]
    model: Option<PathBuf>,
    /// Use the RX baseline instead of a model.
    #[arg(long)]
    rx: bool,
    /// Patch stride for reconstruction.
    #[arg(long, default_value_t = 8)]
    stride: usize,
    /// Score map CSV.
    #[arg(long, default_value = "scores.csv")]
    out: PathBuf,
    /// Grayscale image; defaults to the CSV path with a `.pgm` extension.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Report JSON.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// ROC CSV; defaults to the report path with a `.roc.csv` suffix.
    #[arg(long)]
    roc: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Band count; defaults to `model.bands`, or 32 when that is 0.
    #[arg(long)]
    bands: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DUALSCAN_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Detect(a) => commands::detect(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Info(a) => commands::info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

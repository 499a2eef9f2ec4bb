//! Command-line entry point for the full-video clustered training workflow.
//!
//! Exit status: 0 success, 1 argument/validation error, 2 runtime failure.
//! Every subcommand writes a manifest into its output directory; outputs are
//! deterministic given `--seed` (wall-clock fields in metrics excepted).

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fullvideo_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "fullvideo",
    version,
    about = "Full-video training via temporal activation clustering"
)]
struct Cli {
    /// Cap worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a Move4MNIST-style dataset (train.fvds / test.fvds).
    GenData(GenDataArgs),
    /// Train the clustered or full pipeline on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Check the pairwise gradient-approximation error bound.
    VerifyGrad(VerifyGradArgs),
    /// Export activation-distance vs gradient-distance scatter tables.
    Scatter(ScatterArgs),
    /// Export per-epoch cluster assignments for visualization.
    Cluster(ClusterArgs),
    /// Benchmark the packed Hamming kernel against the naive bit loop.
    BenchHamming(BenchHammingArgs),
    /// Report per-block MAC counts and the clustered-cost identity.
    Flops(FlopsArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (under FVAR_OUT when that is set).
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 1800)]
    train_count: usize,
    #[arg(long, default_value_t = 600)]
    test_count: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Probability of a background-only distractor chunk.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    bg_prob: f64,
    /// Probability of a black-frame distractor chunk.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    black_prob: f64,
    /// Probability of a foreign-digit distractor chunk.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    foreign_prob: f64,
    #[arg(long, default_value_t = 4)]
    distractor_min: usize,
    #[arg(long, default_value_t = 12)]
    distractor_max: usize,
    /// MNIST IDX image file; procedural glyphs when absent.
    #[arg(long)]
    idx_images: Option<PathBuf>,
    /// MNIST IDX label file.
    #[arg(long)]
    idx_labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory holding train.fvds and test.fvds.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "runs/run")]
    out: PathBuf,
    /// Pipeline config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// cumulative | slope | uniform | none
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Evenly-spaced frame subsampling baseline (forces method none).
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    temporal_shift: bool,
    /// f32 | f64
    #[arg(long)]
    precision: Option<String>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate every N epochs (0 = final epoch only).
    #[arg(long, default_value_t = 5)]
    eval_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// test | train
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    temporal_shift: bool,
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args, Debug)]
struct VerifyGradArgs {
    #[arg(long, default_value_t = 10_000)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Testbed weight scale; the bound is checked in this operating regime.
    #[arg(long, default_value_t = 0.25)]
    weight_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    delta_scale: f64,
    #[arg(long, default_value_t = 1e-9)]
    eps: f64,
    #[arg(long, default_value = "verify-grad")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScatterArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Checkpoint to probe; a seeded random init when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 10)]
    videos: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write report.csv: per-cluster gradient-approximation distances
    /// for cumulative, slope, and uniform clustering at this cluster count.
    #[arg(long)]
    gradient_report: Option<usize>,
    #[arg(long, default_value = "scatter")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Training output directory holding checkpoint-epoch-NNN.fvck files.
    #[arg(long)]
    checkpoints: PathBuf,
    /// cumulative | slope | uniform
    #[arg(long, default_value = "cumulative")]
    method: String,
    #[arg(long, default_value_t = 16)]
    clusters: usize,
    /// Epochs 1..=N to export; missing checkpoints are listed and skipped.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 6)]
    videos: usize,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also dump each video's block-1 signatures per epoch (.fvsg files).
    #[arg(long)]
    dump_signatures: bool,
    #[arg(long, default_value = "cluster-vis")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchHammingArgs {
    #[arg(long, default_value_t = 1_000_000)]
    bits: usize,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bench-hamming")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// cumulative | slope | uniform | none
    #[arg(long, default_value = "cumulative")]
    method: String,
    #[arg(long, default_value_t = 16)]
    clusters: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long, default_value = "flops")]
    out: PathBuf,
}

/// FVAR_OUT, when set, becomes the root for relative output paths.
fn resolve_out(out: &Path) -> PathBuf {
    match std::env::var_os("FVAR_OUT") {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

fn write_manifest(out_dir: &Path, seed: Option<u64>) -> Result<(), Error> {
    std::fs::create_dir_all(out_dir)?;
    let argv: Vec<String> = std::env::args().collect();
    let manifest = serde_json::json!({
        "argv": argv,
        "seed": seed,
        "build_tag": fullvideo_core::trainer::build_tag(),
    });
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage text; route errors to stderr
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            // --help / --version land on stdout with status 0
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };

    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::VerifyGrad(args) => commands::verify_grad(args),
        Command::Scatter(args) => commands::scatter(args),
        Command::Cluster(args) => commands::cluster(args),
        Command::BenchHamming(args) => commands::bench_hamming(args),
        Command::Flops(args) => commands::flops(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::EmptyInput(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

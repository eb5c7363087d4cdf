//! `depthcomp` command-line tool.
//!
//! Every subcommand prints its full effective configuration as the first
//! line of standard output (prefixed `#`), and repeats that line at the top of
//! every CSV it writes. Diagnostics go to standard error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "depthcomp",
    version,
    about = "Depth completion toolkit: densification, attention, scale-consistent training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fill a sparse KITTI depth PNG by dilation or interpolation.
    Densify(DensifyArgs),
    /// Compare a predicted depth PNG with a ground-truth PNG.
    Eval(EvalArgs),
    /// Time the attention variants and fit log-log complexity slopes.
    Bench(BenchArgs),
    /// Run the toy direct-vs-decomposed depth optimization.
    TrainToy(TrainArgs),
    /// Write a synthetic scene: dense and sparse depth PNGs plus the camera motion.
    GenScene(SceneArgs),
    /// Density and fill error of several densifiers on a synthetic scene.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
struct DensifyArgs {
    /// Sparse KITTI depth PNG.
    input: PathBuf,
    /// Output PNG.
    output: PathBuf,
    /// Dilation kernel, e.g. square5, cross3.
    #[arg(long, conflicts_with = "interp", required_unless_present = "interp")]
    kernel: Option<String>,
    /// Interpolation method: nearest or bilinear.
    #[arg(long)]
    interp: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predicted depth PNG; every pixel where the ground truth is valid must be valid.
    pred: PathBuf,
    /// Ground-truth depth PNG.
    gt: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated grid sizes, HxW.
    #[arg(long, default_value = "32x32,64x64,128x128")]
    sizes: String,
    /// Comma-separated variants among ca, dsa, fdsa.
    #[arg(long, default_value = "ca,dsa,fdsa")]
    variants: String,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Timed repetitions per (size, variant); the median is reported.
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip wall-clock timing; the CSV then depends only on the inputs.
    #[arg(long)]
    no_timing: bool,
    /// Output CSV. Defaults to `<out-dir>/bench_<seed>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "DEPTHCOMP_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SceneOpts {
    /// Scene size, HxW.
    #[arg(long, default_value = "128x128")]
    size: String,
    /// planes, slanted-ramp or boxes.
    #[arg(long, default_value = "boxes")]
    layout: String,
    /// Fraction of pixels kept in the sparse input.
    #[arg(long, default_value_t = 0.05)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// direct, dscl, or both (paired run on the same scene).
    #[arg(long, default_value = "dscl")]
    mode: String,
    /// Scale region grid, RxC.
    #[arg(long, default_value = "2x2")]
    regions: String,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    step_size: f64,
    #[arg(long, default_value_t = 1e-3)]
    smoothness: f64,
    #[command(flatten)]
    scene: SceneOpts,
    /// Output directory.
    #[arg(long, env = "DEPTHCOMP_OUT_DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SceneArgs {
    #[command(flatten)]
    scene: SceneOpts,
    #[arg(long, env = "DEPTHCOMP_OUT_DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblationArgs {
    #[command(flatten)]
    scene: SceneOpts,
    /// Comma-separated densifiers.
    #[arg(long, default_value = "cross3,cross5,square3,square5,square7,nearest,bilinear")]
    configs: String,
    #[arg(long, env = "DEPTHCOMP_OUT_DIR", default_value = ".")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Densify(a) => commands::densify(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::TrainToy(a) => commands::train_toy(a),
        Command::GenScene(a) => commands::gen_scene(a),
        Command::Ablation(a) => commands::ablation(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

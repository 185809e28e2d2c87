//! Command-line pipeline: synthetic data generation, training, evaluation,
//! inference and a complexity report.

use afcf3d::config::TrainConfig;
use afcf3d::data;
use afcf3d::encoder::Mode;
use afcf3d::error::{Error, IoContext, Result};
use afcf3d::io;
use afcf3d::model::{self, ModelConfig};
use afcf3d::render;
use afcf3d::train;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "afcf3d",
    about = "Bi-temporal change detection with 3-D convolutional feature fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired-tile dataset with train/val/test splits.
    Synth(SynthArgs),
    /// Train a model and keep the checkpoint with the best validation F1.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Predict the change map for a single image pair.
    Infer(InferArgs),
    /// Report parameter count and per-forward FLOPs.
    Complexity(ComplexityArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// Number of image pairs to generate.
    #[arg(long, default_value_t = 384)]
    pairs: usize,
    /// Square tile edge in pixels (multiple of 32).
    #[arg(long, default_value_t = 256)]
    tile: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root with A/, B/, label/ and split manifests.
    #[arg(long)]
    data: PathBuf,
    /// Optional key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the checkpoint and training log.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the configuration file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread hint; ignored unless determinism is waived.
    #[arg(long)]
    threads: Option<usize>,
    /// Force a bit-reproducible run (single-threaded execution).
    #[arg(long, default_value_t = false)]
    deterministic: bool,
    /// Network variant: "3d" fuses the acquisitions on the time axis, "2d"
    /// stacks them on channels.
    #[arg(long, default_value = "3d")]
    mode: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report format: "text" or "json".
    #[arg(long, default_value = "text")]
    report: String,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// First acquisition (PNG).
    #[arg(long)]
    a: PathBuf,
    /// Second acquisition (PNG).
    #[arg(long)]
    b: PathBuf,
    /// Optional ground truth; enables the four-color comparison render.
    #[arg(long)]
    label: Option<PathBuf>,
    /// Output directory for the probability and change-map rasters.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ComplexityArgs {
    /// Square input edge used for the FLOP estimate.
    #[arg(long, default_value_t = 256)]
    input_size: usize,
    #[arg(long, default_value = "3d")]
    mode: String,
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    data::generate_dataset(&args.out, args.pairs, args.tile, args.seed)?;
    let held = args.pairs / 6;
    println!(
        "wrote {} pairs of {}x{} tiles to {} (train {}, val {}, test {})",
        args.pairs,
        args.tile,
        args.tile,
        args.out.display(),
        args.pairs - 2 * held,
        held,
        held
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    if let Some(t) = args.threads {
        // Every kernel runs sequentially, so a thread hint never changes
        // results; it is accepted for interface compatibility.
        if cfg.deterministic && t > 1 {
            eprintln!("note: --threads {t} ignored, run is deterministic and single-threaded");
        }
    }
    let mode = Mode::parse(&args.mode)?;
    let model_cfg = ModelConfig::full(mode);
    let summary = train::train(&args.data, &args.out, &model_cfg, &cfg)?;
    for r in &summary.epochs {
        println!(
            "epoch {:>3}  loss {:.6}  val_f1 {:.4}  val_iou {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.val_f1, r.val_iou, r.wall_time
        );
    }
    println!(
        "best val F1 {:.4} at epoch {}; checkpoint {}",
        summary.best_val_f1,
        summary.best_epoch,
        summary.checkpoint.display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let (mut store, model_cfg) = io::load_checkpoint(&args.checkpoint)?;
    let report = train::evaluate_split(&mut store, &model_cfg, &args.data, &args.split)?;
    match args.report.as_str() {
        "text" => print!("{}", report.to_text()),
        "json" => println!("{}", report.to_json()),
        other => return Err(Error::config(format!("unknown report format '{other}'"))),
    }
    Ok(())
}

fn run_infer(args: &InferArgs) -> Result<()> {
    let (mut store, model_cfg) = io::load_checkpoint(&args.checkpoint)?;
    let a = data::load_image(&args.a)?;
    let b = data::load_image(&args.b)?;
    let prob = train::infer_pair(&mut store, &model_cfg, a, b)?;
    let (h, w) = (prob.shape.h, prob.shape.w);
    std::fs::create_dir_all(&args.out).at(&args.out)?;
    render::save_probability_png(&args.out.join("probability.png"), prob.data(), h, w)?;
    let pred = render::threshold_mask(prob.data(), train::EVAL_THRESHOLD);
    let map = match &args.label {
        Some(path) => {
            let (truth, lh, lw) = data::load_mask(path)?;
            if (lh, lw) != (h, w) {
                return Err(Error::ingestion(format!(
                    "label extent {lh}x{lw} does not match prediction {h}x{w}"
                )));
            }
            render::ChangeMapRender::comparison(&pred, &truth, h, w)?
        }
        None => render::ChangeMapRender::binary(&pred, h, w)?,
    };
    map.save_png(&args.out.join("change_map.png"))?;
    io::write_tensor(&args.out.join("probability.t5d"), &prob)?;
    println!(
        "wrote probability.png, probability.t5d and change_map.png to {}",
        args.out.display()
    );
    Ok(())
}

fn run_complexity(args: &ComplexityArgs) -> Result<()> {
    if args.input_size == 0 || args.input_size % 32 != 0 {
        return Err(Error::config(format!(
            "input size must be a positive multiple of 32, got {}",
            args.input_size
        )));
    }
    let mode = Mode::parse(&args.mode)?;
    let cfg = ModelConfig::full(mode);
    let report = model::complexity(&cfg, args.input_size, args.input_size)?;
    println!("params: {:.2} M ({})", report.params as f64 / 1e6, report.params);
    println!(
        "flops at {0}x{0}: {1:.2} G ({2})",
        args.input_size,
        report.flops as f64 / 1e9,
        report.flops
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Complexity(a) => run_complexity(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

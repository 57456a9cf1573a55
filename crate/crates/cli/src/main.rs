//! Command-line entry point: train, evaluate, sample, probe, and synthetic
//! dataset generation around the core library.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use hpgan_core::checkpoint::Checkpoint;
use hpgan_core::config::TrainConfig;
use hpgan_core::data::{load_dataset, synthetic_dataset, write_synthetic_pngs, Dataset};
use hpgan_core::metrics::MetricsReport;
use hpgan_core::trainer::{
    bundled_probe_sets, probe_batch_diversity, run_training, EvalContext, Trainer,
};

/// Number of images in the bundled synthetic dataset when none is given.
const DEFAULT_SYNTH_COUNT: usize = 500;

#[derive(Parser)]
#[command(name = "hpgan", about = "Projected multi-scale GAN training harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration flags shared by every subcommand that builds a TrainConfig.
#[derive(Args)]
struct ConfigArgs {
    /// Path to a flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable): --set key=value
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the run seed (applied after --set).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (optionally resuming from a checkpoint).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: $HPGAN_OUT_DIR/<digest> or ./runs/<digest>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against the configured dataset.
    Eval {
        /// Checkpoint file to evaluate.
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write an image grid sampled from a checkpoint's EMA weights.
    Sample {
        /// Checkpoint file to sample from.
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of images in the grid.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Output PNG path (default: sample.png next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the batch-diversity probe on the bundled image sets.
    Probe {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Augmentation draws per measurement.
        #[arg(long, default_value_t = 100)]
        draws: usize,
    },
    /// Generate the bundled synthetic dataset as PNG files.
    MakeSynth {
        /// Output directory for the PNGs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SYNTH_COUNT)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn build_config(args: &ConfigArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    for kv in &args.set {
        let (key, value) = kv
            .split_once('=')
            .with_context(|| format!("--set '{kv}' is not KEY=VALUE"))?;
        cfg.set(key, value).with_context(|| format!("--set {kv}"))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves the dataset named by the config: a directory of images, or the
/// bundled synthetic corpus via `synth` / `synth:<count>`.
fn resolve_dataset(cfg: &TrainConfig) -> anyhow::Result<Dataset> {
    let name = cfg.dataset.trim();
    if name.is_empty() {
        bail!("config key 'dataset' is empty; point it at an image directory or 'synth'");
    }
    if let Some(rest) = name.strip_prefix("synth") {
        let count = match rest.strip_prefix(':') {
            Some(n) => n.parse::<usize>().context("synth:<count> must be an integer")?,
            None if rest.is_empty() => DEFAULT_SYNTH_COUNT,
            _ => bail!("unknown dataset '{name}'"),
        };
        return Ok(synthetic_dataset(count, cfg.resolution, cfg.data_seed())?);
    }
    Ok(load_dataset(
        Path::new(name),
        cfg.resolution,
        cfg.subset,
        cfg.data_seed(),
    )?)
}

fn default_out_dir(cfg: &TrainConfig) -> PathBuf {
    let root = std::env::var_os("HPGAN_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(&cfg.digest_hex()[..12])
}

fn print_report(row: &MetricsReport) {
    println!("{}", MetricsReport::csv_header());
    println!("{}", row.csv_row());
    println!();
    println!("fid        {:.6}", row.fid);
    println!("kid        {:.6}", row.kid);
    println!("precision  {:.6}", row.precision);
    println!("recall     {:.6}", row.recall);
    println!("ppl_full   {:.6}", row.ppl_full);
    println!("ppl_end    {:.6}", row.ppl_end);
    println!("logit_frac {:.6}", row.signed_logit_fraction);
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train { cfg, out, resume } => {
            let cfg = build_config(&cfg)?;
            let dataset = resolve_dataset(&cfg)?;
            let out_dir = out.unwrap_or_else(|| default_out_dir(&cfg));
            println!(
                "training level {} at {}x{} on {} images -> {}",
                cfg.level,
                cfg.resolution,
                cfg.resolution,
                dataset.len(),
                out_dir.display()
            );
            let summary = run_training(&cfg, &dataset, &out_dir, resume.as_deref(), true)?;
            println!(
                "best fid {:.6} at {} images; final checkpoint {}",
                summary.best_fid,
                summary.best_images_seen,
                summary.final_checkpoint.display()
            );
        }
        Command::Eval { checkpoint, cfg } => {
            let cfg = build_config(&cfg)?;
            let dataset = resolve_dataset(&cfg)?;
            let ck = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let mut trainer = Trainer::from_checkpoint(&cfg, &ck)?;
            let ctx = EvalContext::new(&cfg, &dataset)?;
            let row = trainer.evaluate(&ctx, &dataset, None)?;
            print_report(&row);
        }
        Command::Sample {
            checkpoint,
            cfg,
            count,
            out,
        } => {
            let cfg = build_config(&cfg)?;
            let ck = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let trainer = Trainer::from_checkpoint(&cfg, &ck)?;
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("sample.png")
            });
            trainer.sample_grid(count, cfg.seed, &out)?;
            println!("wrote {count}-image grid to {}", out.display());
        }
        Command::Probe { cfg, draws } => {
            let cfg = build_config(&cfg)?;
            let sets = bundled_probe_sets(&cfg, cfg.batch);
            let report = probe_batch_diversity(&cfg, &sets, draws)?;
            print!("{}", report.render());
            if !report.passed() {
                bail!("probe orderings not satisfied");
            }
        }
        Command::MakeSynth {
            out,
            count,
            resolution,
            seed,
        } => {
            let n = write_synthetic_pngs(&out, count, resolution, seed)?;
            println!("wrote {n} synthetic images to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

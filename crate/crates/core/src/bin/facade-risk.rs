use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use facade_risk::ingest::Split;
use facade_risk::model::checkpoint;
use facade_risk::model::train::LrSchedule;
use facade_risk::pipeline::{self, PipelineConfig};

/// Facade-image fireproof-risk pipeline.
///
/// Every subcommand accepts `--config <file>` (TOML). Flags given on the
/// command line override values from the file, which override built-in defaults.
#[derive(Parser)]
#[command(version, about, long_about = None)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic labeled facade corpus.
    Synth(SynthArgs),
    /// Parse and filter property/image manifests.
    Ingest(IngestArgs),
    /// Remove near-duplicate images and apply the category filter.
    Dedup(DedupArgs),
    /// Assign properties to train/test.
    Split(SplitArgs),
    /// Train the multi-task model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Predict year, structure, property type and fireproof class for one image.
    Predict(PredictArgs),
    /// Run every stage in order, skipping up-to-date stages.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of properties [config: synth.n_properties, default 1000]
    #[arg(long)]
    n_properties: Option<usize>,
    /// Random seed [config: seed, default 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Cue fidelity in [0, 1] [config: synth.cue_strength, default 1.0]
    #[arg(long)]
    cue_strength: Option<f64>,
    /// Minimum images per property [config: synth.images_min, default 1]
    #[arg(long)]
    images_min: Option<usize>,
    /// Maximum images per property [config: synth.images_max, default 3]
    #[arg(long)]
    images_max: Option<usize>,
    /// Share of properties with a metadata defect [config: synth.invalid_fraction, default 0]
    #[arg(long)]
    invalid_fraction: Option<f64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Property manifest (JSON Lines)
    #[arg(long)]
    properties: PathBuf,
    /// Image manifest (JSON Lines)
    #[arg(long)]
    images: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DedupArgs {
    /// Image manifest
    #[arg(long)]
    images: PathBuf,
    /// Hamming threshold in [0, 64] [config: dedup_threshold, default 10]
    #[arg(long)]
    threshold: Option<u32>,
    /// Output image manifest
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Filtered property manifest
    #[arg(long)]
    properties: PathBuf,
    /// Split seed [config: seed, default 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Share of properties in train [config: train_fraction, default 0.8]
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Output split file (`property_id<TAB>train|test`)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with properties.jsonl, images.jsonl and optionally split.tsv
    #[arg(long)]
    data: Option<PathBuf>,
    /// Property manifest [default: <data>/properties.jsonl]
    #[arg(long)]
    properties: Option<PathBuf>,
    /// Image manifest [default: <data>/images.jsonl]
    #[arg(long)]
    images: Option<PathBuf>,
    /// Split file; only train properties are used [default: <data>/split.tsv if present]
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Learning rate [config: train.learning_rate, default 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// Learning-rate schedule [config: train.schedule, default cosine]
    #[arg(long, value_enum)]
    lr_schedule: Option<LrSchedule>,
    /// Epochs [config: train.epochs, default 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size [config: train.batch_size, default 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for initialization and shuffling [config: seed, default 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint; loss_trace.jsonl is written beside it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file
    #[arg(long)]
    ckpt: PathBuf,
    /// Image manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Property manifest [default: properties.jsonl beside the image manifest]
    #[arg(long)]
    properties: Option<PathBuf>,
    /// Split file; without one every image in the manifest is evaluated
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Which split to evaluate
    #[arg(long, default_value = "test")]
    split: Split,
    /// Report file (JSON Lines); confusion_<task>.tsv files are written beside it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint file
    #[arg(long)]
    ckpt: PathBuf,
    /// Image file
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Work directory [config: work_dir, default ./work]
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Seed for synthesis, split and training [config: seed, default 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic properties [config: synth.n_properties, default 1000]
    #[arg(long)]
    n_properties: Option<usize>,
    /// Cue fidelity [config: synth.cue_strength, default 1.0]
    #[arg(long)]
    cue_strength: Option<f64>,
    /// Dedup threshold [config: dedup_threshold, default 10]
    #[arg(long)]
    threshold: Option<u32>,
    /// Train share [config: train_fraction, default 0.8]
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Learning rate [config: train.learning_rate, default 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// Learning-rate schedule [config: train.schedule, default cosine]
    #[arg(long, value_enum)]
    lr_schedule: Option<LrSchedule>,
    /// Epochs [config: train.epochs, default 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size [config: train.batch_size, default 32]
    #[arg(long)]
    batch_size: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn existing(path: PathBuf) -> Option<PathBuf> {
    path.exists().then_some(path)
}

fn beside(manifest: &Path, name: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(name)
}

fn out_dir_of(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => {
            set(&mut cfg.synth.n_properties, a.n_properties);
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.synth.cue_strength, a.cue_strength);
            set(&mut cfg.synth.images_min, a.images_min);
            set(&mut cfg.synth.images_max, a.images_max);
            set(&mut cfg.synth.invalid_fraction, a.invalid_fraction);
            let s = pipeline::run_synth(&cfg.synth_spec(), &a.out)?;
            cfg.echo(&a.out)?;
            println!("properties={} images={}", s.n_properties, s.n_images);
        }
        Command::Ingest(a) => {
            let s = pipeline::run_ingest(&a.properties, &a.images, &a.out)?;
            cfg.echo(&a.out)?;
            println!(
                "properties={}/{} images={}/{} diagnostics={}",
                s.properties_retained, s.properties_in, s.images_retained, s.images_in, s.diagnostics
            );
        }
        Command::Dedup(a) => {
            set(&mut cfg.dedup_threshold, a.threshold);
            cfg.validate().context("invalid configuration")?;
            let s = pipeline::run_dedup(&a.images, cfg.dedup_threshold, &a.out)?;
            cfg.echo(out_dir_of(&a.out))?;
            println!("images={}/{} clusters={}", s.images_retained, s.images_in, s.clusters);
        }
        Command::Split(a) => {
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.train_fraction, a.train_fraction);
            let s = pipeline::run_split(&a.properties, cfg.seed, cfg.train_fraction, &a.out)?;
            cfg.echo(out_dir_of(&a.out))?;
            println!(
                "train={} test={} fraction={:.4}",
                s.count(Split::Train),
                s.count(Split::Test),
                s.realized_train_fraction()
            );
        }
        Command::Train(a) => {
            set(&mut cfg.train.learning_rate, a.lr);
            set(&mut cfg.train.schedule, a.lr_schedule);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.seed, a.seed);
            let data = a.data.as_deref();
            let need = |explicit: Option<PathBuf>, name: &str| -> Result<PathBuf> {
                explicit
                    .or_else(|| data.map(|d| d.join(name)))
                    .with_context(|| format!("pass --data or --{}", name.trim_end_matches(".jsonl")))
            };
            let properties = need(a.properties, "properties.jsonl")?;
            let images = need(a.images, "images.jsonl")?;
            let split = a.split_file.or_else(|| data.and_then(|d| existing(d.join("split.tsv"))));
            let trace = pipeline::run_train(&properties, &images, split.as_deref(), &cfg.train_config(), &a.out)?;
            cfg.echo(out_dir_of(&a.out))?;
            println!(
                "initial_loss={:.6} final_loss={:.6} epochs={}",
                trace.initial,
                trace.final_combined(),
                trace.epochs.len()
            );
        }
        Command::Eval(a) => {
            let properties = a
                .properties
                .unwrap_or_else(|| beside(&a.manifest, "properties.jsonl"));
            let r = pipeline::run_eval(
                &a.ckpt,
                &a.manifest,
                &properties,
                a.split_file.as_deref(),
                a.split,
                &a.out,
            )?;
            cfg.echo(out_dir_of(&a.out))?;
            println!(
                "n={} excluded={} year_mae={:.3} structure_acc={:.4} ptype_acc={:.4} fireproof_acc={:.4}",
                r.n_images, r.n_excluded, r.year.mae, r.structure.accuracy, r.ptype.accuracy, r.fireproof.accuracy
            );
        }
        Command::Predict(a) => {
            let model = checkpoint::load(&a.ckpt)?;
            println!("{}", model.predict_file(&a.image)?.to_line());
        }
        Command::Pipeline(a) => {
            set(&mut cfg.work_dir, a.work_dir);
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.synth.n_properties, a.n_properties);
            set(&mut cfg.synth.cue_strength, a.cue_strength);
            set(&mut cfg.dedup_threshold, a.threshold);
            set(&mut cfg.train_fraction, a.train_fraction);
            set(&mut cfg.train.learning_rate, a.lr);
            set(&mut cfg.train.schedule, a.lr_schedule);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.batch_size, a.batch_size);
            let outcome = pipeline::run_pipeline(&cfg)?;
            for (stage, status) in &outcome.stages {
                println!("{stage}: {}", serde_json::to_string(status)?.trim_matches('"'));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Stage runners, the pipeline configuration, and content-hash stage caching.
//!
//! Work directory layout:
//!
//! ```text
//! <work>/synth/    properties.jsonl images.jsonl images/
//! <work>/ingest/   properties.jsonl images.jsonl rejections.jsonl diagnostics.jsonl
//! <work>/dedup/    images.jsonl hashes.tsv clusters.jsonl dedup_rejections.jsonl
//! <work>/split/    split.tsv
//! <work>/train/    model.ckpt loss_trace.jsonl
//! <work>/eval/     report.jsonl confusion_<task>.tsv
//! <work>/.stamps/  one SHA-256 per stage over its inputs and settings
//! ```
//!
//! Each stage directory also receives `config.toml` holding the resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dedup::{self, HeuristicFilter};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_run, EvaluationReport};
use crate::ingest::{self, Split, SplitAssignment, DEFAULT_TRAIN_FRACTION};
use crate::model::train::{self, Corpus, LossTrace, LrSchedule, TrainConfig};
use crate::model::{checkpoint, Architecture};
use crate::synthgen::{self, SynthSpec, SynthSummary};

pub const CONFIG_ECHO: &str = "config.toml";
pub const LOSS_TRACE_FILE: &str = "loss_trace.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_properties: usize,
    pub images_min: usize,
    pub images_max: usize,
    pub cue_strength: f64,
    pub invalid_fraction: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthSpec::default();
        SynthSection {
            n_properties: d.n_properties,
            images_min: d.images_per_property.0,
            images_max: d.images_per_property.1,
            cue_strength: d.cue_strength,
            invalid_fraction: d.invalid_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub year_anchor: f64,
    pub year_scale: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            learning_rate: d.learning_rate,
            schedule: d.schedule,
            epochs: d.epochs,
            batch_size: d.batch_size,
            year_anchor: d.year_anchor,
            year_scale: d.year_scale,
        }
    }
}

/// Existing manifests to start from instead of rendering a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub properties: PathBuf,
    pub images: PathBuf,
}

/// Settings shared by every subcommand. One `seed` drives synthesis, the
/// split and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub work_dir: PathBuf,
    pub seed: u64,
    pub dedup_threshold: u32,
    pub train_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Inputs>,
    pub synth: SynthSection,
    pub train: TrainSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            work_dir: PathBuf::from("work"),
            seed: 0,
            dedup_threshold: dedup::DEFAULT_THRESHOLD,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            inputs: None,
            synth: SynthSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_properties: self.synth.n_properties,
            images_per_property: (self.synth.images_min, self.synth.images_max),
            cue_strength: self.synth.cue_strength,
            invalid_fraction: self.synth.invalid_fraction,
            seed: self.seed,
            ..SynthSpec::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            schedule: self.train.schedule,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            year_anchor: self.train.year_anchor,
            year_scale: self.train.year_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_none() {
            self.synth_spec().validate()?;
        }
        self.train_config().validate()?;
        if self.dedup_threshold > 64 {
            return Err(Error::Config(format!(
                "dedup_threshold must be in [0, 64], got {}",
                self.dedup_threshold
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn run_synth(spec: &SynthSpec, out_dir: &Path) -> Result<SynthSummary> {
    synthgen::generate(spec, out_dir)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub properties_in: usize,
    pub properties_retained: usize,
    pub images_in: usize,
    pub images_retained: usize,
    pub diagnostics: usize,
}

#[derive(Serialize)]
struct RejectionLine<'a> {
    kind: &'static str,
    id: &'a str,
    reason: &'a str,
}

/// Parses both manifests, filters properties and drops their orphaned images.
pub fn run_ingest(properties: &Path, images: &Path, out_dir: &Path) -> Result<IngestSummary> {
    let manifest = ingest::load_manifest(properties, images)?;
    let outcome = ingest::filter_metadata(&manifest.properties);
    let images_in = manifest.images.len();
    let (kept, orphans) = ingest::filter_images(manifest.images, &outcome.retained);
    ensure_dir(out_dir)?;
    ingest::write_properties(&out_dir.join("properties.jsonl"), &outcome.retained)?;
    ingest::write_images(&out_dir.join("images.jsonl"), &kept)?;
    let mut rejections: Vec<RejectionLine> = outcome
        .rejected
        .iter()
        .map(|r| RejectionLine {
            kind: "property",
            id: &r.property_id,
            reason: r.reason.as_str(),
        })
        .collect();
    rejections.extend(orphans.iter().map(|r| RejectionLine {
        kind: "image",
        id: &r.image_id,
        reason: &r.reason,
    }));
    ingest::write_jsonl(&out_dir.join("rejections.jsonl"), &rejections)?;
    let diagnostics: Vec<_> = manifest
        .property_diagnostics
        .iter()
        .map(|d| ("properties", d))
        .chain(manifest.image_diagnostics.iter().map(|d| ("images", d)))
        .map(|(file, d)| serde_json::json!({"file": file, "line": d.line, "field": d.field, "message": d.message}))
        .collect();
    ingest::write_jsonl(&out_dir.join("diagnostics.jsonl"), &diagnostics)?;
    for d in &manifest.property_diagnostics {
        log::warn!("{}: {d}", properties.display());
    }
    for d in &manifest.image_diagnostics {
        log::warn!("{}: {d}", images.display());
    }
    Ok(IngestSummary {
        properties_in: manifest.properties.len() + manifest.property_diagnostics.len(),
        properties_retained: outcome.retained.len(),
        images_in,
        images_retained: kept.len(),
        diagnostics: diagnostics.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DedupSummary {
    pub images_in: usize,
    pub images_retained: usize,
    pub clusters: usize,
}

/// Dedups `images` and writes the retained manifest to `out`, with
/// `hashes.tsv`, `clusters.jsonl` and `dedup_rejections.jsonl` beside it.
pub fn run_dedup(images: &Path, threshold: u32, out: &Path) -> Result<DedupSummary> {
    let (records, diags) = ingest::load_images(images)?;
    if let Some(d) = diags.first() {
        return Err(Error::Parse {
            path: images.to_path_buf(),
            line: d.line,
            message: d.to_string(),
        });
    }
    let images_in = records.len();
    let outcome = dedup::dedup_images(records, threshold, &HeuristicFilter::default())?;
    let dir = parent_dir(out);
    ensure_dir(dir)?;
    ingest::write_images(out, &outcome.retained)?;
    dedup::write_hash_cache(&dir.join("hashes.tsv"), &outcome.hashes)?;
    ingest::write_jsonl(&dir.join("clusters.jsonl"), &outcome.clusters)?;
    ingest::write_jsonl(&dir.join("dedup_rejections.jsonl"), &outcome.rejected)?;
    Ok(DedupSummary {
        images_in,
        images_retained: outcome.retained.len(),
        clusters: outcome.clusters.len(),
    })
}

pub fn run_split(properties: &Path, seed: u64, train_fraction: f64, out: &Path) -> Result<SplitAssignment> {
    let index = ingest::load_property_index(properties)?;
    let mut records: Vec<_> = index.into_values().collect();
    records.sort_by(|a, b| a.property_id.cmp(&b.property_id));
    let assignment = ingest::split_properties(&records, seed, train_fraction)?;
    ensure_dir(parent_dir(out))?;
    assignment.write(out)?;
    Ok(assignment)
}

/// Trains on the `train` side of `split` (or on every image when no split is
/// given) and writes the checkpoint plus `loss_trace.jsonl` beside it.
pub fn run_train(
    properties: &Path,
    images: &Path,
    split: Option<&Path>,
    config: &TrainConfig,
    out: &Path,
) -> Result<LossTrace> {
    config.validate()?;
    let index = ingest::load_property_index(properties)?;
    let (records, _) = ingest::load_images(images)?;
    let records = match split {
        Some(path) => {
            let a = SplitAssignment::read(path)?;
            records
                .into_iter()
                .filter(|im| a.get(&im.property_id) == Some(Split::Train))
                .collect()
        }
        None => records,
    };
    let arch = Architecture::default();
    let (corpus, skipped) = Corpus::load(&records, &index, arch.image_size);
    if !skipped.is_empty() {
        log::warn!("{} training images skipped", skipped.len());
    }
    info!("training on {} images", corpus.len());
    let (model, trace) = train::train(arch, &corpus, config)?;
    ensure_dir(parent_dir(out))?;
    checkpoint::save(&model, out)?;
    trace.write(&parent_dir(out).join(LOSS_TRACE_FILE))?;
    Ok(trace)
}

pub fn run_eval(
    ckpt: &Path,
    images: &Path,
    properties: &Path,
    split_file: Option<&Path>,
    split: Split,
    out: &Path,
) -> Result<EvaluationReport> {
    let model = checkpoint::load(ckpt)?;
    let index = ingest::load_property_index(properties)?;
    let (records, _) = ingest::load_images(images)?;
    let assignment = split_file.map(SplitAssignment::read).transpose()?;
    let report = evaluate_run(&model, &records, &index, assignment.as_ref(), split)?;
    ensure_dir(parent_dir(out))?;
    report.write(out)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
    /// Inputs were supplied by the configuration.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PipelineOutcome {
    pub stages: Vec<(String, StageStatus)>,
}

impl PipelineOutcome {
    pub fn status(&self, stage: &str) -> Option<StageStatus> {
        self.stages.iter().find(|(s, _)| s == stage).map(|(_, st)| *st)
    }
}

/// Paths of every pipeline artifact under a work directory.
#[derive(Debug, Clone)]
pub struct WorkLayout {
    pub root: PathBuf,
}

impl WorkLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        WorkLayout { root: root.into() }
    }
    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
    pub fn stamp(&self, name: &str) -> PathBuf {
        self.root.join(".stamps").join(name)
    }
    pub fn synth_properties(&self) -> PathBuf {
        self.stage("synth").join(synthgen::PROPERTIES_FILE)
    }
    pub fn synth_images(&self) -> PathBuf {
        self.stage("synth").join(synthgen::IMAGES_FILE)
    }
    pub fn properties(&self) -> PathBuf {
        self.stage("ingest").join("properties.jsonl")
    }
    pub fn ingest_images(&self) -> PathBuf {
        self.stage("ingest").join("images.jsonl")
    }
    pub fn images(&self) -> PathBuf {
        self.stage("dedup").join("images.jsonl")
    }
    pub fn split(&self) -> PathBuf {
        self.stage("split").join("split.tsv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.stage("train").join("model.ckpt")
    }
    pub fn loss_trace(&self) -> PathBuf {
        self.stage("train").join(LOSS_TRACE_FILE)
    }
    pub fn report(&self) -> PathBuf {
        self.stage("eval").join("report.jsonl")
    }
}

/// Content hash over a stage's settings and the bytes of its input files.
/// Paths are not hashed, so a copied work directory keeps its stamps.
struct Stamp(Sha256);

impl Stamp {
    fn new(stage: &str, settings: &impl Serialize) -> Self {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(settings).expect("plain data"));
        Stamp(h)
    }

    fn file(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        Ok(())
    }

    /// Every image referenced by a manifest. Unreadable files hash as a marker.
    fn manifest_images(&mut self, manifest: &Path) -> Result<()> {
        let (records, _) = ingest::load_images(manifest)?;
        for im in records {
            self.0.update(im.image_id.as_bytes());
            match fs::read(&im.path) {
                Ok(b) => {
                    self.0.update((b.len() as u64).to_le_bytes());
                    self.0.update(b);
                }
                Err(_) => self.0.update(b"<unreadable>"),
            }
        }
        Ok(())
    }

    fn hex(self) -> String {
        self.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn run_stage(
    layout: &WorkLayout,
    config: &PipelineConfig,
    name: &str,
    stamp: Stamp,
    outputs: &[PathBuf],
    run: impl FnOnce() -> Result<()>,
) -> Result<StageStatus> {
    let digest = stamp.hex();
    let stamp_path = layout.stamp(name);
    let fresh = fs::read_to_string(&stamp_path).is_ok_and(|s| s.trim() == digest)
        && outputs.iter().all(|p| p.exists());
    if fresh {
        info!("{name}: up to date");
        return Ok(StageStatus::Skipped);
    }
    info!("{name}: running");
    // Drop the stamp first so an interrupted stage is never considered fresh.
    let _ = fs::remove_file(&stamp_path);
    run()?;
    config.echo(&layout.stage(name))?;
    ensure_dir(parent_dir(&stamp_path))?;
    fs::write(&stamp_path, format!("{digest}\n")).map_err(|e| Error::io(&stamp_path, e))?;
    Ok(StageStatus::Ran)
}

/// Runs synth (unless inputs are given), ingest, dedup, split, train and eval
/// in order, skipping stages whose stamp matches and whose outputs exist.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let layout = WorkLayout::new(&config.work_dir);
    let mut stages = Vec::new();

    let (raw_properties, raw_images) = match &config.inputs {
        Some(inputs) => {
            stages.push(("synth".to_string(), StageStatus::External));
            (inputs.properties.clone(), inputs.images.clone())
        }
        None => {
            let spec = config.synth_spec();
            let out = layout.stage("synth");
            let status = run_stage(
                &layout,
                config,
                "synth",
                Stamp::new("synth", &spec),
                &[layout.synth_properties(), layout.synth_images()],
                || run_synth(&spec, &out).map(|_| ()),
            )?;
            stages.push(("synth".to_string(), status));
            (layout.synth_properties(), layout.synth_images())
        }
    };

    let mut stamp = Stamp::new("ingest", &());
    stamp.file(&raw_properties)?;
    stamp.file(&raw_images)?;
    let status = run_stage(
        &layout,
        config,
        "ingest",
        stamp,
        &[layout.properties(), layout.ingest_images()],
        || run_ingest(&raw_properties, &raw_images, &layout.stage("ingest")).map(|_| ()),
    )?;
    stages.push(("ingest".to_string(), status));

    let mut stamp = Stamp::new("dedup", &config.dedup_threshold);
    stamp.file(&layout.ingest_images())?;
    stamp.manifest_images(&layout.ingest_images())?;
    let status = run_stage(&layout, config, "dedup", stamp, &[layout.images()], || {
        run_dedup(&layout.ingest_images(), config.dedup_threshold, &layout.images()).map(|_| ())
    })?;
    stages.push(("dedup".to_string(), status));

    let mut stamp = Stamp::new("split", &(config.seed, config.train_fraction));
    stamp.file(&layout.properties())?;
    let status = run_stage(&layout, config, "split", stamp, &[layout.split()], || {
        run_split(&layout.properties(), config.seed, config.train_fraction, &layout.split()).map(|_| ())
    })?;
    stages.push(("split".to_string(), status));

    let train_config = config.train_config();
    let mut stamp = Stamp::new("train", &train_config);
    stamp.file(&layout.properties())?;
    stamp.file(&layout.images())?;
    stamp.file(&layout.split())?;
    stamp.manifest_images(&layout.images())?;
    let status = run_stage(
        &layout,
        config,
        "train",
        stamp,
        &[layout.checkpoint(), layout.loss_trace()],
        || {
            run_train(
                &layout.properties(),
                &layout.images(),
                Some(&layout.split()),
                &train_config,
                &layout.checkpoint(),
            )
            .map(|_| ())
        },
    )?;
    stages.push(("train".to_string(), status));

    let mut stamp = Stamp::new("eval", &"test");
    stamp.file(&layout.checkpoint())?;
    stamp.file(&layout.properties())?;
    stamp.file(&layout.images())?;
    stamp.file(&layout.split())?;
    stamp.manifest_images(&layout.images())?;
    let status = run_stage(&layout, config, "eval", stamp, &[layout.report()], || {
        run_eval(
            &layout.checkpoint(),
            &layout.images(),
            &layout.properties(),
            Some(&layout.split()),
            Split::Test,
            &layout.report(),
        )
        .map(|_| ())
    })?;
    stages.push(("eval".to_string(), status));

    Ok(PipelineOutcome { stages })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = PipelineConfig::from_toml("seed = 9\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.train.epochs, 2);
        assert_eq!(partial.train.batch_size, 32);
        assert_eq!(partial.dedup_threshold, 10);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(PipelineConfig::from_toml("sed = 1\n").is_err());
        let c = PipelineConfig {
            train_fraction: 1.0,
            ..PipelineConfig::default()
        };
        assert!(c.validate().is_err());
        let c = PipelineConfig {
            dedup_threshold: 65,
            ..PipelineConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.train.learning_rate = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn inputs_table_serializes() {
        let c = PipelineConfig {
            inputs: Some(Inputs {
                properties: "p.jsonl".into(),
                images: "i.jsonl".into(),
            }),
            ..PipelineConfig::default()
        };
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}

//! Minibatch training with Adam over backbone, heads and log-variances jointly.

use std::collections::HashMap;
use std::path::Path;

use image::RgbImage;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::{batch_losses, combined_loss_with_grad, Architecture, ImageBatch, MultiTaskModel, TaskLoss, YearNorm};
use crate::dedup::load_rgb;
use crate::error::{Error, Result};
use crate::ingest::{ImageRecord, ImageRejection, PropertyRecord};
use crate::rules::{BuildingStructure, PropertyType};

/// Learning rates used for the pretrained large backbone; kept for the comparison experiment.
pub const PRESET_LR_HIGH: f64 = 1e-5;
pub const PRESET_LR_LOW: f64 = 1e-6;
pub const DEFAULT_LR: f64 = 1e-3;

/// Per-step learning-rate multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate at the first step down to zero after the last.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Multiplier for zero-based `step` out of `total` steps.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub year_anchor: f64,
    pub year_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let norm = YearNorm::default();
        TrainConfig {
            learning_rate: DEFAULT_LR,
            schedule: LrSchedule::default(),
            epochs: 10,
            batch_size: 32,
            seed: 0,
            year_anchor: norm.anchor,
            year_scale: norm.scale,
        }
    }
}

impl TrainConfig {
    pub fn year_norm(&self) -> YearNorm {
        YearNorm {
            anchor: self.year_anchor,
            scale: self.year_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.year_scale != 0.0 && self.year_scale.is_finite()) || !self.year_anchor.is_finite() {
            return Err(Error::InvalidArgument("year normalization must be finite with nonzero scale".into()));
        }
        Ok(())
    }
}

/// One labeled image, already at the model's input size.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub image: RgbImage,
    pub year: i32,
    pub structure: BuildingStructure,
    pub ptype: PropertyType,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// Decodes every image; unreadable files and orphan records are skipped and reported.
    pub fn load(
        images: &[ImageRecord],
        properties: &HashMap<String, PropertyRecord>,
        image_size: usize,
    ) -> (Corpus, Vec<ImageRejection>) {
        let s = image_size as u32;
        let mut samples = Vec::with_capacity(images.len());
        let mut rejected = Vec::new();
        for rec in images {
            let Some(prop) = properties.get(&rec.property_id) else {
                rejected.push(ImageRejection {
                    image_id: rec.image_id.clone(),
                    reason: "orphan_property".into(),
                });
                continue;
            };
            match load_rgb(&rec.path) {
                Ok(mut img) => {
                    if img.width() != s || img.height() != s {
                        img = image::imageops::resize(&img, s, s, image::imageops::FilterType::Triangle);
                    }
                    samples.push(Sample {
                        image_id: rec.image_id.clone(),
                        image: img,
                        year: prop.construction_year,
                        structure: prop.structure,
                        ptype: prop.ptype,
                    });
                }
                Err(e) => {
                    warn!("skipping {}: {e}", rec.image_id);
                    rejected.push(ImageRejection {
                        image_id: rec.image_id.clone(),
                        reason: "unreadable".into(),
                    });
                }
            }
        }
        (Corpus { samples }, rejected)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub combined: f64,
    pub year: f64,
    pub structure: f64,
    pub ptype: f64,
    pub log_var: [f64; 3],
}

/// Loss history. `initial` is the combined loss of the first minibatch before
/// any update; each epoch entry is the mean over that epoch's minibatches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub initial: f64,
    pub initial_tasks: TaskLoss,
    pub epochs: Vec<EpochLoss>,
}

impl LossTrace {
    pub fn final_combined(&self) -> f64 {
        self.epochs.last().map_or(self.initial, |e| e.combined)
    }

    /// One JSON line for the initial state, then one per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({
            "epoch": 0,
            "initial": self.initial,
            "year": self.initial_tasks.year,
            "structure": self.initial_tasks.structure,
            "ptype": self.initial_tasks.ptype,
        })
        .to_string();
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain data"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

fn assemble(samples: &[&Sample]) -> ImageBatch {
    let (h, w) = (samples[0].image.height() as usize, samples[0].image.width() as usize);
    let mut data = Vec::with_capacity(samples.len() * h * w * 3);
    for s in samples {
        data.extend(s.image.as_raw().iter().map(|&b| b as f32 / 255.0));
    }
    ImageBatch {
        n: samples.len(),
        height: h,
        width: w,
        data,
    }
}

/// Trains a freshly initialized model. Deterministic in `config.seed`.
pub fn train(arch: Architecture, corpus: &Corpus, config: &TrainConfig) -> Result<(MultiTaskModel, LossTrace)> {
    let model = MultiTaskModel::new(arch, config.year_norm(), config.seed)?;
    train_model(model, corpus, config)
}

pub fn train_model(
    mut model: MultiTaskModel,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(MultiTaskModel, LossTrace)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    let size = model.arch.image_size as u32;
    if let Some(bad) = corpus
        .samples
        .iter()
        .find(|s| s.image.width() != size || s.image.height() != size)
    {
        return Err(Error::ShapeMismatch {
            expected: format!("{size}x{size}"),
            got: format!("{}x{} ({})", bad.image.width(), bad.image.height(), bad.image_id),
        });
    }
    model.year_norm = config.year_norm();
    let adam = AdamConfig::new(config.learning_rate);
    let mut opt = Adam::<f32>::new(adam, model.param_count());
    let mut opt_s = Adam::<f64>::new(adam, 3);
    let mut grad = vec![0.0f32; model.param_count()];
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut initial: Option<(f64, TaskLoss)> = None;
    let mut epochs = Vec::with_capacity(config.epochs);
    let total_steps = config.epochs * corpus.len().div_ceil(config.batch_size);
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum = TaskLoss::default();
        let mut sum_combined = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &corpus.samples[i]).collect();
            let batch = assemble(&samples);
            let years: Vec<f32> = samples
                .iter()
                .map(|s| model.year_norm.normalize(s.year as f64) as f32)
                .collect();
            let structures: Vec<usize> = samples.iter().map(|s| s.structure.index()).collect();
            let ptypes: Vec<usize> = samples.iter().map(|s| s.ptype.index()).collect();

            let cache = model.forward_cached(&batch)?;
            let (tl, heads) = batch_losses(&cache, &years, &structures, &ptypes, &model.uncertainty);
            let combined = combined_loss_with_grad(&tl.as_array(), &model.uncertainty.log_var);
            let (value, _, d_s) = match combined {
                Ok(v) => v,
                Err(_) => return Err(Error::NonFiniteLoss { epoch, batch: b + 1 }),
            };
            if heads.year.iter().chain(&heads.structure).chain(&heads.ptype).any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            if initial.is_none() {
                initial = Some((value, tl));
            }
            grad.fill(0.0);
            model.backward(&cache, &heads, &mut grad);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            let lr = config.learning_rate * config.schedule.factor(step, total_steps);
            opt.config.lr = lr;
            opt_s.config.lr = lr;
            step += 1;
            opt.step(&mut model.params, &grad);
            opt_s.step(&mut model.uncertainty.log_var, &d_s);

            sum.year += tl.year;
            sum.structure += tl.structure;
            sum.ptype += tl.ptype;
            sum_combined += value;
            n_batches += 1;
        }
        let k = n_batches as f64;
        let entry = EpochLoss {
            epoch,
            combined: sum_combined / k,
            year: sum.year / k,
            structure: sum.structure / k,
            ptype: sum.ptype / k,
            log_var: model.uncertainty.log_var,
        };
        info!(
            "epoch {epoch}: combined {:.5} year {:.5} structure {:.5} ptype {:.5}",
            entry.combined, entry.year, entry.structure, entry.ptype
        );
        epochs.push(entry);
    }

    let (initial, initial_tasks) = match initial {
        Some(v) => v,
        None => {
            // Zero epochs: report the loss of the first batch without training.
            let n = config.batch_size.min(corpus.len());
            let samples: Vec<&Sample> = corpus.samples[..n].iter().collect();
            let cache = model.forward_cached(&assemble(&samples))?;
            let years: Vec<f32> = samples
                .iter()
                .map(|s| model.year_norm.normalize(s.year as f64) as f32)
                .collect();
            let st: Vec<usize> = samples.iter().map(|s| s.structure.index()).collect();
            let pt: Vec<usize> = samples.iter().map(|s| s.ptype.index()).collect();
            let (tl, _) = batch_losses(&cache, &years, &st, &pt, &model.uncertainty);
            (super::combined_loss(&tl.as_array(), &model.uncertainty.log_var)?, tl)
        }
    };
    Ok((
        model,
        LossTrace {
            initial,
            initial_tasks,
            epochs,
        },
    ))
}

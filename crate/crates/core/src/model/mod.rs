//! Multi-task facade network.
//!
//! A compact backbone of four blocks (3x3 conv, ReLU, 2x downsample; channels
//! 16, 32, 64, 128) ends in global average pooling. Three affine heads read the
//! same pooled feature: normalized construction year, building structure
//! (3-way softmax) and property type (2-way softmax).

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod train;

use image::imageops::FilterType;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::{fireproof_class, BuildingStructure, FireproofClass, PropertyType};
use layers::{argmax, col2im, cross_entropy, gemm, im2col, softmax, ConvGeom, Mat};
pub use loss::{
    combined_loss, combined_loss_sigma, combined_loss_with_grad, optimal_sigma, TaskLoss,
    UncertaintyWeights, N_TASKS,
};

pub const N_STRUCTURE: usize = 3;
pub const N_PTYPE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub image_size: usize,
    pub in_channels: usize,
    pub channels: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            image_size: 128,
            in_channels: 3,
            channels: vec![16, 32, 64, 128],
        }
    }
}

impl Architecture {
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::InvalidArgument("architecture needs nonzero channels".into()));
        }
        if self.image_size == 0 {
            return Err(Error::InvalidArgument("image size must be nonzero".into()));
        }
        Ok(())
    }

    /// Tensor names and shapes in declared (checkpoint) order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        let mut cin = self.in_channels;
        for (i, &cout) in self.channels.iter().enumerate() {
            specs.push(TensorSpec::new(format!("conv{}.weight", i + 1), vec![cout, cin, 3, 3]));
            specs.push(TensorSpec::new(format!("conv{}.bias", i + 1), vec![cout]));
            cin = cout;
        }
        let f = self.feature_dim();
        for (name, out) in [("year", 1), ("structure", N_STRUCTURE), ("ptype", N_PTYPE)] {
            specs.push(TensorSpec::new(format!("{name}.weight"), vec![out, f]));
            specs.push(TensorSpec::new(format!("{name}.bias"), vec![out]));
        }
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn new(name: String, shape: Vec<usize>) -> Self {
        TensorSpec { name, shape }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Affine map between Gregorian years and the regression target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YearNorm {
    pub anchor: f64,
    pub scale: f64,
}

impl Default for YearNorm {
    fn default() -> Self {
        YearNorm {
            anchor: 1970.0,
            scale: 50.0,
        }
    }
}

impl YearNorm {
    pub fn normalize(&self, year: f64) -> f64 {
        (year - self.anchor) / self.scale
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        self.anchor + value * self.scale
    }
}

/// NHWC batch of RGB images with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageBatch {
    pub fn from_images(images: &[&RgbImage]) -> Result<Self> {
        let (h, w) = images
            .first()
            .map(|im| (im.height() as usize, im.width() as usize))
            .unwrap_or((0, 0));
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for im in images {
            if (im.height() as usize, im.width() as usize) != (h, w) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{h}x{w}"),
                    got: format!("{}x{}", im.height(), im.width()),
                });
            }
            data.extend(im.as_raw().iter().map(|&b| b as f32 / 255.0));
        }
        Ok(ImageBatch {
            n: images.len(),
            height: h,
            width: w,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Normalized year per image.
    pub year: Vec<f32>,
    pub structure_probs: Vec<[f32; N_STRUCTURE]>,
    pub ptype_probs: Vec<[f32; N_PTYPE]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub year: f64,
    pub structure: BuildingStructure,
    pub ptype: PropertyType,
    pub fireproof: FireproofClass,
    pub structure_probs: [f32; N_STRUCTURE],
    pub ptype_probs: [f32; N_PTYPE],
}

impl Prediction {
    /// Hierarchical decoding: argmax of each head, then the fireproof rule.
    pub fn from_heads(
        year_norm: f64,
        norm: &YearNorm,
        structure_probs: [f32; N_STRUCTURE],
        ptype_probs: [f32; N_PTYPE],
    ) -> Self {
        let structure = BuildingStructure::from_index(argmax(&structure_probs)).expect("3 classes");
        let ptype = PropertyType::from_index(argmax(&ptype_probs)).expect("2 classes");
        Prediction {
            year: norm.denormalize(year_norm),
            structure,
            ptype,
            fireproof: fireproof_class(structure, ptype),
            structure_probs,
            ptype_probs,
        }
    }

    /// `year=<f> structure=<s> ptype=<p> fireproof=<c>`
    pub fn to_line(&self) -> String {
        format!(
            "year={:.2} structure={} ptype={} fireproof={}",
            self.year, self.structure, self.ptype, self.fireproof
        )
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub specs: Vec<TensorSpec>,
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let specs = arch.tensor_specs();
        let mut offsets = Vec::with_capacity(specs.len());
        let mut total = 0;
        for s in &specs {
            offsets.push(total);
            total += s.len();
        }
        Layout {
            specs,
            offsets,
            total,
        }
    }

    fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.specs[i].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    pub arch: Architecture,
    pub year_norm: YearNorm,
    pub uncertainty: UncertaintyWeights,
    pub(crate) params: Vec<f32>,
    pub(crate) layout: Layout,
}

/// Intermediate values kept for the backward pass.
pub(crate) struct ForwardCache {
    geoms: Vec<ConvGeom>,
    cols: Vec<Vec<f32>>,
    acts: Vec<Vec<f32>>,
    feat: Vec<f32>,
    pub year: Vec<f32>,
    pub structure_logits: Vec<f32>,
    pub ptype_logits: Vec<f32>,
}

/// Per-sample gradients of the loss with respect to the head outputs.
pub(crate) struct HeadGrads {
    pub year: Vec<f32>,
    pub structure: Vec<f32>,
    pub ptype: Vec<f32>,
}

impl MultiTaskModel {
    /// He-normal conv weights, zero biases, small head weights. Deterministic in `seed`.
    pub fn new(arch: Architecture, year_norm: YearNorm, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0f32; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, spec) in layout.specs.iter().enumerate() {
            if spec.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = spec.shape[1..].iter().product();
            let std = if spec.name.starts_with("conv") {
                (2.0 / fan_in as f64).sqrt()
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("valid std");
            for p in &mut params[layout.range(i)] {
                *p = normal.sample(&mut rng) as f32;
            }
        }
        Ok(MultiTaskModel {
            arch,
            year_norm,
            uncertainty: UncertaintyWeights::default(),
            params,
            layout,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    /// Named view of one tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let i = self.layout.specs.iter().position(|s| s.name == name)?;
        Some(&self.params[self.layout.range(i)])
    }

    fn conv_params(&self, layer: usize) -> (&[f32], &[f32]) {
        (
            &self.params[self.layout.range(2 * layer)],
            &self.params[self.layout.range(2 * layer + 1)],
        )
    }

    fn head_params(&self, head: usize) -> (&[f32], &[f32]) {
        let base = 2 * self.arch.channels.len() + 2 * head;
        (
            &self.params[self.layout.range(base)],
            &self.params[self.layout.range(base + 1)],
        )
    }

    fn check_batch(&self, batch: &ImageBatch) -> Result<()> {
        let s = self.arch.image_size;
        let expected = batch.n * s * s * self.arch.in_channels;
        if batch.n > 0 && (batch.height != s || batch.width != s) || batch.data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{s}x{s}x{}", batch.n, self.arch.in_channels),
                got: format!(
                    "{}x{}x{}x? ({} values)",
                    batch.n,
                    batch.height,
                    batch.width,
                    batch.data.len()
                ),
            });
        }
        Ok(())
    }

    /// NHWC in [0, 1] to centered CNHW.
    fn to_planes(&self, batch: &ImageBatch) -> Vec<f32> {
        let (n, c) = (batch.n, self.arch.in_channels);
        let hw = self.arch.image_size * self.arch.image_size;
        let mut planes = vec![0.0f32; c * n * hw];
        for img in 0..n {
            let src = &batch.data[img * hw * c..][..hw * c];
            for ch in 0..c {
                let dst = &mut planes[(ch * n + img) * hw..][..hw];
                for (p, d) in dst.iter_mut().enumerate() {
                    *d = src[p * c + ch] - 0.5;
                }
            }
        }
        planes
    }

    pub(crate) fn forward_cached(&self, batch: &ImageBatch) -> Result<ForwardCache> {
        self.check_batch(batch)?;
        let n = batch.n;
        let mut x = self.to_planes(batch);
        let (mut h, mut w, mut cin) = (self.arch.image_size, self.arch.image_size, self.arch.in_channels);
        let mut geoms = Vec::new();
        let mut cols = Vec::new();
        let mut acts = Vec::new();
        for (layer, &cout) in self.arch.channels.iter().enumerate() {
            let g = ConvGeom { cin, cout, n, h, w };
            let mut col = vec![0.0f32; g.k() * g.m()];
            im2col(&x, &g, &mut col);
            let (weight, bias) = self.conv_params(layer);
            let m = g.m();
            let mut out = vec![0.0f32; cout * m];
            gemm(Mat::new(weight, cout, g.k()), Mat::new(&col, g.k(), m), 0.0, &mut out);
            for (co, row) in out.chunks_mut(m.max(1)).enumerate().take(cout) {
                let b = bias[co];
                for v in row {
                    *v = (*v + b).max(0.0);
                }
            }
            h = g.ho();
            w = g.wo();
            cin = cout;
            geoms.push(g);
            cols.push(col);
            acts.push(out.clone());
            x = out;
        }
        let f = cin;
        let spatial = h * w;
        let mut feat = vec![0.0f32; n * f];
        for c in 0..f {
            for img in 0..n {
                let plane = &x[(c * n + img) * spatial..][..spatial];
                feat[img * f + c] = plane.iter().sum::<f32>() / spatial as f32;
            }
        }
        let head = |idx: usize, out: usize| -> Vec<f32> {
            let (weight, bias) = self.head_params(idx);
            let mut logits = vec![0.0f32; n * out];
            if n > 0 {
                gemm(Mat::new(&feat, n, f), Mat::new(weight, out, f).t(), 0.0, &mut logits);
            }
            for row in logits.chunks_mut(out) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            logits
        };
        let year = head(0, 1);
        let structure_logits = head(1, N_STRUCTURE);
        let ptype_logits = head(2, N_PTYPE);
        Ok(ForwardCache {
            geoms,
            cols,
            acts,
            feat,
            year,
            structure_logits,
            ptype_logits,
        })
    }

    /// Pure forward pass: normalized year and both probability rows per image.
    pub fn forward(&self, batch: &ImageBatch) -> Result<ForwardOutput> {
        let cache = self.forward_cached(batch)?;
        Ok(ForwardOutput {
            year: cache.year,
            structure_probs: cache
                .structure_logits
                .chunks(N_STRUCTURE)
                .map(|l| softmax(l).try_into().expect("3 classes"))
                .collect(),
            ptype_probs: cache
                .ptype_logits
                .chunks(N_PTYPE)
                .map(|l| softmax(l).try_into().expect("2 classes"))
                .collect(),
        })
    }

    /// Accumulates parameter gradients into `grad` (same layout as the parameters).
    pub(crate) fn backward(&self, cache: &ForwardCache, heads: &HeadGrads, grad: &mut [f32]) {
        let n = cache.feat.len() / self.arch.feature_dim().max(1);
        let f = self.arch.feature_dim();
        let n_layers = self.arch.channels.len();
        let mut dfeat = vec![0.0f32; n * f];
        for (idx, out, dlogits) in [
            (0usize, 1usize, &heads.year),
            (1, N_STRUCTURE, &heads.structure),
            (2, N_PTYPE, &heads.ptype),
        ] {
            let base = 2 * n_layers + 2 * idx;
            let (weight, _) = self.head_params(idx);
            let wr = self.layout.range(base);
            let br = self.layout.range(base + 1);
            // dW[out x f] += dlogits^T[out x n] * feat[n x f]
            gemm(
                Mat::new(dlogits, n, out).t(),
                Mat::new(&cache.feat, n, f),
                1.0,
                &mut grad[wr],
            );
            for row in dlogits.chunks(out) {
                for (g, d) in grad[br.clone()].iter_mut().zip(row) {
                    *g += d;
                }
            }
            // dfeat[n x f] += dlogits[n x out] * W[out x f]
            gemm(Mat::new(dlogits, n, out), Mat::new(weight, out, f), 1.0, &mut dfeat);
        }

        let last = &cache.geoms[n_layers - 1];
        let spatial = last.ho() * last.wo();
        let mut dout = vec![0.0f32; f * n * spatial];
        for c in 0..f {
            for img in 0..n {
                let g = dfeat[img * f + c] / spatial as f32;
                dout[(c * n + img) * spatial..][..spatial].fill(g);
            }
        }

        for layer in (0..n_layers).rev() {
            let g = &cache.geoms[layer];
            let m = g.m();
            // ReLU mask
            for (d, a) in dout.iter_mut().zip(&cache.acts[layer]) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            let wr = self.layout.range(2 * layer);
            let br = self.layout.range(2 * layer + 1);
            gemm(
                Mat::new(&dout, g.cout, m),
                Mat::new(&cache.cols[layer], g.k(), m).t(),
                1.0,
                &mut grad[wr],
            );
            for (co, row) in dout.chunks(m.max(1)).enumerate().take(g.cout) {
                grad[br.start + co] += row.iter().sum::<f32>();
            }
            if layer == 0 {
                break;
            }
            let (weight, _) = self.conv_params(layer);
            let mut dcol = vec![0.0f32; g.k() * m];
            gemm(Mat::new(weight, g.cout, g.k()).t(), Mat::new(&dout, g.cout, m), 0.0, &mut dcol);
            let mut din = vec![0.0f32; g.cin * g.n * g.h * g.w];
            col2im(&dcol, g, &mut din);
            dout = din;
        }
    }

    /// Resizes to the model's input size (bilinear) if needed.
    pub fn prepare_image(&self, img: &RgbImage) -> RgbImage {
        let s = self.arch.image_size as u32;
        if img.width() == s && img.height() == s {
            img.clone()
        } else {
            image::imageops::resize(img, s, s, FilterType::Triangle)
        }
    }

    pub fn predict_batch(&self, images: &[&RgbImage]) -> Result<Vec<Prediction>> {
        let prepared: Vec<RgbImage> = images.iter().map(|im| self.prepare_image(im)).collect();
        let refs: Vec<&RgbImage> = prepared.iter().collect();
        let out = self.forward(&ImageBatch::from_images(&refs)?)?;
        Ok((0..images.len())
            .map(|i| {
                Prediction::from_heads(
                    out.year[i] as f64,
                    &self.year_norm,
                    out.structure_probs[i],
                    out.ptype_probs[i],
                )
            })
            .collect())
    }

    pub fn predict(&self, image: &RgbImage) -> Result<Prediction> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    pub fn predict_file(&self, path: &std::path::Path) -> Result<Prediction> {
        self.predict(&crate::dedup::load_rgb(path)?)
    }
}

/// Mean task losses of one batch and the gradients they induce on the heads,
/// already scaled by the uncertainty weights.
pub(crate) fn batch_losses(
    cache: &ForwardCache,
    year_targets: &[f32],
    structure_targets: &[usize],
    ptype_targets: &[usize],
    weights: &UncertaintyWeights,
) -> (TaskLoss, HeadGrads) {
    let n = year_targets.len();
    let inv_n = 1.0 / n.max(1) as f64;
    let [wy, ws, wp] = weights.task_weights();
    let mut loss = TaskLoss::default();
    let mut year = vec![0.0f32; n];
    for i in 0..n {
        let e = cache.year[i] as f64 - year_targets[i] as f64;
        loss.year += e * e * inv_n;
        year[i] = (wy * 2.0 * e * inv_n) as f32;
    }
    let ce = |logits: &[f32], targets: &[usize], k: usize, w: f64| -> (f64, Vec<f32>) {
        let mut total = 0.0;
        let mut grad = vec![0.0f32; n * k];
        for (i, &t) in targets.iter().enumerate() {
            let row = &logits[i * k..][..k];
            total += cross_entropy(row, t) * inv_n;
            let p = softmax(row);
            for j in 0..k {
                let onehot = if j == t { 1.0 } else { 0.0 };
                grad[i * k + j] = (w * (p[j] as f64 - onehot) * inv_n) as f32;
            }
        }
        (total, grad)
    };
    let (ls, structure) = ce(&cache.structure_logits, structure_targets, N_STRUCTURE, ws);
    let (lp, ptype) = ce(&cache.ptype_logits, ptype_targets, N_PTYPE, wp);
    loss.structure = ls;
    loss.ptype = lp;
    (
        loss,
        HeadGrads {
            year,
            structure,
            ptype,
        },
    )
}

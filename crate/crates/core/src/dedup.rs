//! DCT perceptual hashing, near-duplicate removal and image-category filtering.
//!
//! The hash is fixed bit for bit:
//!
//! 1. luma `round(0.299 R + 0.587 G + 0.114 B)` per pixel;
//! 2. bilinear resize to 32x32 with pixel-center alignment
//!    (`src = (dst + 0.5) * in / out - 0.5`, clamped at the borders);
//! 3. orthonormal 2-D type-II DCT of the 32x32 block;
//! 4. the 8x8 low-frequency corner, scanned row-major (vertical frequency
//!    major), is compared against the median of its 63 non-DC coefficients;
//! 5. coefficient `k` of the scan sets bit `63 - k` when it exceeds the median.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ImageRecord, ImageRejection};

pub const HASH_INPUT_SIZE: usize = 32;
pub const HASH_BLOCK: usize = 8;
pub const DEFAULT_THRESHOLD: u32 = 10;

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayRaster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayRaster {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let pixels = img
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        GrayRaster {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels,
        }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x] as f64
    }
}

/// Decodes an image file to 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HashBits(pub u64);

impl HashBits {
    pub fn hamming(self, other: HashBits) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

impl fmt::Display for HashBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerceptualHash {
    pub bits: HashBits,
    pub source_image: String,
}

fn resize_bilinear(src: &GrayRaster, out_w: usize, out_h: usize) -> Vec<f64> {
    let coords = |dst: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; out_w * out_h];
    for y in 0..out_h {
        let (y0, y1, fy) = coords(y, out_h, src.height);
        for x in 0..out_w {
            let (x0, x1, fx) = coords(x, out_w, src.width);
            let top = src.at(x0, y0) * (1.0 - fx) + src.at(x1, y0) * fx;
            let bottom = src.at(x0, y1) * (1.0 - fx) + src.at(x1, y1) * fx;
            out[y * out_w + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// `basis[k][n] = alpha(k) * cos((2n + 1) k pi / 2N)` for N = 32.
fn dct_basis() -> &'static [[f64; HASH_INPUT_SIZE]; HASH_INPUT_SIZE] {
    static BASIS: OnceLock<[[f64; HASH_INPUT_SIZE]; HASH_INPUT_SIZE]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let n = HASH_INPUT_SIZE as f64;
        let mut b = [[0.0; HASH_INPUT_SIZE]; HASH_INPUT_SIZE];
        for (k, row) in b.iter_mut().enumerate() {
            let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for (i, v) in row.iter_mut().enumerate() {
                *v = alpha * ((2 * i + 1) as f64 * k as f64 * std::f64::consts::PI / (2.0 * n)).cos();
            }
        }
        b
    })
}

/// Low-frequency 8x8 DCT corner of a 32x32 block (row-major, `[u][v]`).
pub(crate) fn dct_corner(block: &[f64]) -> [[f64; HASH_BLOCK]; HASH_BLOCK] {
    let n = HASH_INPUT_SIZE;
    let basis = dct_basis();
    // Separable: first along x for each row, then along y.
    let mut rows = vec![[0.0; HASH_BLOCK]; n];
    for (y, out) in rows.iter_mut().enumerate() {
        for (v, o) in out.iter_mut().enumerate() {
            *o = (0..n).map(|x| block[y * n + x] * basis[v][x]).sum();
        }
    }
    let mut corner = [[0.0; HASH_BLOCK]; HASH_BLOCK];
    for (u, out) in corner.iter_mut().enumerate() {
        for (v, o) in out.iter_mut().enumerate() {
            *o = (0..n).map(|y| rows[y][v] * basis[u][y]).sum();
        }
    }
    corner
}

pub(crate) fn bits_from_corner(corner: &[[f64; HASH_BLOCK]; HASH_BLOCK]) -> u64 {
    let flat: Vec<f64> = corner.iter().flatten().copied().collect();
    let mut ac: Vec<f64> = flat[1..].to_vec();
    ac.sort_by(f64::total_cmp);
    let median = ac[ac.len() / 2];
    flat.iter().enumerate().fold(0u64, |acc, (k, &c)| {
        if c > median {
            acc | (1u64 << (63 - k))
        } else {
            acc
        }
    })
}

/// Perceptual hash of a grayscale raster.
pub fn phash_raster(img: &GrayRaster) -> Result<HashBits> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::InvalidArgument("image has zero dimensions".into()));
    }
    let block = resize_bilinear(img, HASH_INPUT_SIZE, HASH_INPUT_SIZE);
    Ok(HashBits(bits_from_corner(&dct_corner(&block))))
}

pub fn phash_rgb(img: &RgbImage) -> Result<HashBits> {
    phash_raster(&GrayRaster::from_rgb(img))
}

/// Hashes an image file; decode failures name the file.
pub fn phash_file(path: &Path) -> Result<HashBits> {
    phash_rgb(&load_rgb(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DuplicateCluster {
    pub representative: String,
    pub members: BTreeSet<String>,
    pub max_internal_distance: u32,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage clusters under Hamming distance `<= threshold`.
///
/// Clusters partition the input and are returned ordered by representative,
/// which is the lexicographically smallest member id.
pub fn cluster_duplicates(hashes: &[PerceptualHash], threshold: u32) -> Result<Vec<DuplicateCluster>> {
    if threshold > 64 {
        return Err(Error::InvalidArgument(format!(
            "threshold must be in [0, 64], got {threshold}"
        )));
    }
    let n = hashes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if hashes[i].bits.hamming(hashes[j].bits) <= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut clusters: Vec<DuplicateCluster> = groups
        .into_values()
        .map(|idx| {
            let mut max_d = 0;
            for (a, &i) in idx.iter().enumerate() {
                for &j in &idx[a + 1..] {
                    max_d = max_d.max(hashes[i].bits.hamming(hashes[j].bits));
                }
            }
            let members: BTreeSet<String> =
                idx.iter().map(|&i| hashes[i].source_image.clone()).collect();
            DuplicateCluster {
                representative: members.iter().next().cloned().unwrap_or_default(),
                members,
                max_internal_distance: max_d,
            }
        })
        .collect();
    clusters.sort_by(|a, b| a.representative.cmp(&b.representative));
    Ok(clusters)
}

/// Image content category, as a CLIP-style classifier would label it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryVerdict {
    EntireResidential,
    NoResidential,
    InsideResidential,
    Other,
}

impl CategoryVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            CategoryVerdict::EntireResidential => "entire_residential",
            CategoryVerdict::NoResidential => "no_residential",
            CategoryVerdict::InsideResidential => "inside_residential",
            CategoryVerdict::Other => "other",
        }
    }
}

/// Pluggable image-category classifier. Must be deterministic.
pub trait CategoryFilter {
    fn classify(&self, image: &RgbImage) -> Result<CategoryVerdict>;
}

/// Brightness and edge-statistics classifier.
///
/// Featureless frames are `NoResidential`, badly exposed ones `Other`, and
/// frames whose top band is as busy as an interior wall (no open sky above a
/// building) are `InsideResidential`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicFilter {
    pub min_luma_std: f64,
    pub min_mean_luma: f64,
    pub max_mean_luma: f64,
    pub min_edge_density: f64,
    pub max_sky_edge_density: f64,
    pub sky_band: f64,
}

impl Default for HeuristicFilter {
    fn default() -> Self {
        HeuristicFilter {
            min_luma_std: 0.02,
            min_mean_luma: 0.05,
            max_mean_luma: 0.97,
            min_edge_density: 0.005,
            max_sky_edge_density: 0.08,
            sky_band: 0.15,
        }
    }
}

fn edge_density(luma: &[f64], w: usize, rows: std::ops::Range<usize>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in rows {
        for x in 0..w {
            let v = luma[y * w + x];
            if x + 1 < w {
                sum += (luma[y * w + x + 1] - v).abs();
                count += 1;
            }
            if (y + 1) * w + x < luma.len() {
                sum += (luma[(y + 1) * w + x] - v).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

impl CategoryFilter for HeuristicFilter {
    fn classify(&self, image: &RgbImage) -> Result<CategoryVerdict> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if w < 2 || h < 2 {
            return Err(Error::InvalidArgument("image too small to classify".into()));
        }
        let luma: Vec<f64> = GrayRaster::from_rgb(image)
            .pixels
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect();
        let n = luma.len() as f64;
        let mean = luma.iter().sum::<f64>() / n;
        let std = (luma.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std < self.min_luma_std {
            return Ok(CategoryVerdict::NoResidential);
        }
        if mean < self.min_mean_luma || mean > self.max_mean_luma {
            return Ok(CategoryVerdict::Other);
        }
        if edge_density(&luma, w, 0..h) < self.min_edge_density {
            return Ok(CategoryVerdict::NoResidential);
        }
        let band = ((h as f64 * self.sky_band).ceil() as usize).clamp(1, h);
        if edge_density(&luma, w, 0..band) > self.max_sky_edge_density {
            return Ok(CategoryVerdict::InsideResidential);
        }
        Ok(CategoryVerdict::EntireResidential)
    }
}

/// Keeps exactly the images classified `EntireResidential`.
///
/// Images that fail to load or classify are rejected as `filter_error`.
pub fn apply_category_filter(
    images: Vec<ImageRecord>,
    filter: &dyn CategoryFilter,
) -> (Vec<ImageRecord>, Vec<ImageRejection>) {
    let mut retained = Vec::new();
    let mut rejected = Vec::new();
    for mut im in images {
        match load_rgb(&im.path).and_then(|img| filter.classify(&img)) {
            Ok(CategoryVerdict::EntireResidential) => {
                im.category_verdict = Some(CategoryVerdict::EntireResidential);
                retained.push(im);
            }
            Ok(v) => rejected.push(ImageRejection {
                image_id: im.image_id,
                reason: v.as_str().into(),
            }),
            Err(_) => rejected.push(ImageRejection {
                image_id: im.image_id,
                reason: "filter_error".into(),
            }),
        }
    }
    (retained, rejected)
}

/// Result of hashing, per-property deduplication and category filtering.
#[derive(Debug, Default)]
pub struct DedupOutcome {
    pub retained: Vec<ImageRecord>,
    pub hashes: Vec<PerceptualHash>,
    pub clusters: Vec<DuplicateCluster>,
    pub rejected: Vec<ImageRejection>,
}

/// Hashes every image, keeps one representative per near-duplicate cluster
/// within each property, then applies the category filter.
pub fn dedup_images(
    images: Vec<ImageRecord>,
    threshold: u32,
    filter: &dyn CategoryFilter,
) -> Result<DedupOutcome> {
    let mut out = DedupOutcome::default();
    let mut by_property: BTreeMap<String, Vec<ImageRecord>> = BTreeMap::new();
    for mut im in images {
        match phash_file(&im.path) {
            Ok(bits) => {
                im.phash = Some(bits.0);
                out.hashes.push(PerceptualHash {
                    bits,
                    source_image: im.image_id.clone(),
                });
                by_property.entry(im.property_id.clone()).or_default().push(im);
            }
            Err(_) => out.rejected.push(ImageRejection {
                image_id: im.image_id,
                reason: "unreadable".into(),
            }),
        }
    }
    let mut unique = Vec::new();
    for (_, group) in by_property {
        let hashes: Vec<PerceptualHash> = group
            .iter()
            .map(|im| PerceptualHash {
                bits: HashBits(im.phash.unwrap_or_default()),
                source_image: im.image_id.clone(),
            })
            .collect();
        let clusters = cluster_duplicates(&hashes, threshold)?;
        let mut by_id: BTreeMap<String, ImageRecord> =
            group.into_iter().map(|im| (im.image_id.clone(), im)).collect();
        for c in &clusters {
            for m in &c.members {
                if m != &c.representative {
                    by_id.remove(m);
                    out.rejected.push(ImageRejection {
                        image_id: m.clone(),
                        reason: "near_duplicate".into(),
                    });
                }
            }
        }
        unique.extend(by_id.into_values());
        out.clusters.extend(clusters);
    }
    let (retained, rejected) = apply_category_filter(unique, filter);
    out.retained = retained;
    out.rejected.extend(rejected);
    Ok(out)
}

/// One `image_id<TAB>16-hex-digit hash` line per hash.
pub fn write_hash_cache(path: &Path, hashes: &[PerceptualHash]) -> Result<()> {
    let mut s = String::with_capacity(hashes.len() * 32);
    for h in hashes {
        s.push_str(&h.source_image);
        s.push('\t');
        s.push_str(&h.bits.to_string());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_hash_cache(path: &Path) -> Result<Vec<PerceptualHash>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let (id, hex) = line.split_once('\t').ok_or_else(|| bad("expected `image_id<TAB>hash`"))?;
        if hex.len() != 16 {
            return Err(bad("hash must be 16 hex digits"));
        }
        let bits = u64::from_str_radix(hex, 16).map_err(|_| bad("hash must be 16 hex digits"))?;
        out.push(PerceptualHash {
            bits: HashBits(bits),
            source_image: id.to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn ph(id: &str, bits: u64) -> PerceptualHash {
        PerceptualHash {
            bits: HashBits(bits),
            source_image: id.into(),
        }
    }

    /// Direct evaluation of the 2-D DCT-II definition, O(n^4).
    fn naive_dct(block: &[f64]) -> Vec<f64> {
        let n = HASH_INPUT_SIZE;
        let nf = n as f64;
        let alpha = |k: usize| if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        let mut out = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                let mut s = 0.0;
                for y in 0..n {
                    for x in 0..n {
                        s += block[y * n + x]
                            * ((2 * y + 1) as f64 * u as f64 * std::f64::consts::PI / (2.0 * nf)).cos()
                            * ((2 * x + 1) as f64 * v as f64 * std::f64::consts::PI / (2.0 * nf)).cos();
                    }
                }
                out[u * n + v] = alpha(u) * alpha(v) * s;
            }
        }
        out
    }

    #[test]
    fn separable_dct_matches_definition() {
        let block: Vec<f64> = (0..1024).map(|i| ((i * 37 % 101) as f64).sin() * 100.0).collect();
        let naive = naive_dct(&block);
        let corner = dct_corner(&block);
        for u in 0..HASH_BLOCK {
            for v in 0..HASH_BLOCK {
                assert!((corner[u][v] - naive[u * 32 + v]).abs() < 1e-9);
            }
        }
        // Orthonormal: energy of a constant block lands entirely in DC.
        let flat = vec![10.0; 1024];
        let c = dct_corner(&flat);
        assert!((c[0][0] - 320.0).abs() < 1e-9);
        assert!(c[0][1].abs() < 1e-9 && c[1][0].abs() < 1e-9);
    }

    #[test]
    fn bits_are_msb_first_row_major() {
        let mut corner = [[0.0; 8]; 8];
        // Only coefficient (0, 1) is above the (zero) median.
        corner[0][1] = 5.0;
        assert_eq!(bits_from_corner(&corner), 1u64 << 62);
        // DC uses the same rule.
        corner[0][0] = 5.0;
        assert_eq!(bits_from_corner(&corner), (1u64 << 63) | (1u64 << 62));
    }

    #[test]
    fn luma_weights_and_rounding() {
        let img = RgbImage::from_pixel(1, 1, Rgb([255, 0, 0]));
        assert_eq!(GrayRaster::from_rgb(&img).pixels, vec![76]);
        let img = RgbImage::from_pixel(1, 1, Rgb([10, 20, 30]));
        // 2.99 + 11.74 + 3.42 = 18.15
        assert_eq!(GrayRaster::from_rgb(&img).pixels, vec![18]);
    }

    #[test]
    fn bilinear_identity_and_halving() {
        let src = GrayRaster {
            width: 2,
            height: 1,
            pixels: vec![0, 100],
        };
        assert_eq!(resize_bilinear(&src, 2, 1), vec![0.0, 100.0]);
        // 4 -> 2: samples at 0.5 and 2.5.
        let src = GrayRaster {
            width: 4,
            height: 1,
            pixels: vec![0, 10, 20, 30],
        };
        assert_eq!(resize_bilinear(&src, 2, 1), vec![5.0, 25.0]);
    }

    #[test]
    fn identical_copies_hash_equal() {
        let img = RgbImage::from_fn(40, 30, |x, y| Rgb([(x * 6) as u8, (y * 8) as u8, 90]));
        let copy = img.clone();
        assert_eq!(phash_rgb(&img).unwrap().hamming(phash_rgb(&copy).unwrap()), 0);
    }

    #[test]
    fn zero_sized_raster_errors() {
        let r = GrayRaster {
            width: 0,
            height: 0,
            pixels: vec![],
        };
        assert!(phash_raster(&r).is_err());
    }

    #[test]
    fn undecodable_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.png");
        fs::write(&p, b"not an image").unwrap();
        let msg = phash_file(&p).unwrap_err().to_string();
        assert!(msg.contains("broken.png"), "{msg}");
    }

    #[test]
    fn clusters_identical() {
        let c = cluster_duplicates(&[ph("b", 7), ph("a", 7), ph("c", 7)], 10).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members.len(), 3);
        assert_eq!(c[0].representative, "a");
        assert_eq!(c[0].max_internal_distance, 0);
    }

    #[test]
    fn clusters_far_apart() {
        let c = cluster_duplicates(&[ph("a", 0), ph("b", u64::MAX)], 10).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    fn single_linkage_chains() {
        let a = 0u64;
        let b = 0xFFu64; // 8 bits from a
        let c = 0xFFFFu64; // 8 from b, 16 from a
        let cl = cluster_duplicates(&[ph("a", a), ph("b", b), ph("c", c)], 10).unwrap();
        assert_eq!(cl.len(), 1);
        assert_eq!(cl[0].members.len(), 3);
        assert_eq!(cl[0].max_internal_distance, 16);
    }

    #[test]
    fn threshold_out_of_range() {
        assert!(cluster_duplicates(&[], 65).is_err());
        assert!(cluster_duplicates(&[], 64).unwrap().is_empty());
    }

    struct Fixed(CategoryVerdict);
    impl CategoryFilter for Fixed {
        fn classify(&self, _: &RgbImage) -> Result<CategoryVerdict> {
            Ok(self.0)
        }
    }

    fn image_on_disk(dir: &Path, id: &str) -> ImageRecord {
        let p = dir.join(format!("{id}.png"));
        RgbImage::from_pixel(8, 8, Rgb([10, 200, 30])).save(&p).unwrap();
        ImageRecord {
            image_id: id.into(),
            property_id: "p".into(),
            path: p,
            phash: None,
            category_verdict: None,
        }
    }

    #[test]
    fn category_filter_verdicts() {
        let dir = tempfile::tempdir().unwrap();
        let im = image_on_disk(dir.path(), "a");
        let (keep, drop) =
            apply_category_filter(vec![im.clone()], &Fixed(CategoryVerdict::EntireResidential));
        assert_eq!(keep.len(), 1);
        assert!(drop.is_empty());
        let (keep, drop) =
            apply_category_filter(vec![im.clone()], &Fixed(CategoryVerdict::InsideResidential));
        assert!(keep.is_empty());
        assert_eq!(drop[0].reason, "inside_residential");

        let missing = ImageRecord {
            path: dir.path().join("gone.png"),
            ..im
        };
        let (keep, drop) =
            apply_category_filter(vec![missing], &Fixed(CategoryVerdict::EntireResidential));
        assert!(keep.is_empty());
        assert_eq!(drop[0].reason, "filter_error");
    }

    #[test]
    fn heuristic_rejects_blank_and_noise() {
        let f = HeuristicFilter::default();
        let blank = RgbImage::from_pixel(64, 64, Rgb([128, 128, 128]));
        assert_eq!(f.classify(&blank).unwrap(), CategoryVerdict::NoResidential);
        let mut state = 12345u32;
        let noise = RgbImage::from_fn(64, 64, |_, _| {
            state = state.wrapping_mul(1664525).wrapping_add(1013904223);
            let v = (state >> 24) as u8;
            Rgb([v, v, v])
        });
        assert_eq!(f.classify(&noise).unwrap(), CategoryVerdict::InsideResidential);
        let dark = RgbImage::from_fn(64, 64, |x, _| { let v = (x % 2 * 24) as u8; Rgb([v, v, v]) });
        assert_eq!(f.classify(&dark).unwrap(), CategoryVerdict::Other);
    }

    #[test]
    fn dedup_keeps_one_per_cluster_per_property() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = image_on_disk(dir.path(), "a");
        let mut b = image_on_disk(dir.path(), "b");
        let mut c = image_on_disk(dir.path(), "c");
        a.property_id = "p1".into();
        b.property_id = "p1".into();
        // Same pixels, different property: kept.
        c.property_id = "p2".into();
        let out = dedup_images(vec![b, a, c], 10, &Fixed(CategoryVerdict::EntireResidential)).unwrap();
        let ids: Vec<_> = out.retained.iter().map(|i| i.image_id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
        assert_eq!(out.clusters.len(), out.retained.len());
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].reason, "near_duplicate");
        assert!(out.retained.iter().all(|i| i.phash.is_some()));
    }

    #[test]
    fn hash_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hashes.tsv");
        let hs = vec![ph("x", 0xdead_beef), ph("y", u64::MAX)];
        write_hash_cache(&p, &hs).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "x\t00000000deadbeef\ny\tffffffffffffffff\n");
        assert_eq!(read_hash_cache(&p).unwrap(), hs);
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(a: u64, b: u64, c: u64) {
            let (a, b, c) = (HashBits(a), HashBits(b), HashBits(c));
            prop_assert_eq!(a.hamming(a), 0);
            prop_assert_eq!(a.hamming(b), b.hamming(a));
            prop_assert!(a.hamming(c) <= a.hamming(b) + b.hamming(c));
        }

        #[test]
        fn clusters_partition_input(bits in proptest::collection::vec(any::<u64>(), 0..30), t in 0u32..40) {
            let hashes: Vec<_> = bits.iter().enumerate().map(|(i, b)| ph(&format!("i{i:02}"), *b)).collect();
            let clusters = cluster_duplicates(&hashes, t).unwrap();
            let total: usize = clusters.iter().map(|c| c.members.len()).sum();
            prop_assert_eq!(total, hashes.len());
            let mut seen = BTreeSet::new();
            for c in &clusters {
                prop_assert!(c.members.contains(&c.representative));
                prop_assert_eq!(c.members.iter().next(), Some(&c.representative));
                for m in &c.members {
                    prop_assert!(seen.insert(m.clone()));
                }
            }
        }
    }
}

//! Procedural facade corpus.
//!
//! Every image is a flat-shaded building on a sky/ground backdrop. Three cues
//! carry the labels:
//!
//! - the scene hue encodes construction year, linearly from [`HUE_RAMP_DEG`].0 at
//!   the start of the year range to [`HUE_RAMP_DEG`].1 at its end. All regions share
//!   one chroma vector and differ only in gray level, so the mean color of an
//!   image points in the year's hue direction whatever the building's size;
//! - the number of window rows encodes structure: wooden-like 1-2 floors,
//!   steel-like 3-4, concrete-like 5-7;
//! - the building width encodes property type: communal is a wide block with
//!   three doors, non-communal a narrow house with one.
//!
//! With probability `1 - cue_strength` each cue of a property is rendered from
//! an independent random draw instead of its label.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::MIN_CONSTRUCTION_YEAR;
use crate::rules::{fireproof_class, BuildingStructure, PropertyType, RawPropertyCategory};

pub const IMAGE_SIZE: u32 = 128;
pub const MAX_YEAR: i32 = 2025;
/// Hue angle in degrees at the first and last year of the range.
pub const HUE_RAMP_DEG: (f64, f64) = (0.0, 180.0);
const CHROMA: f64 = 0.22;
const FLOOR_HEIGHT: u32 = 12;
const GROUND_TOP: u32 = 118;
const ROOF_BAND: u32 = 4;
const CELL: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeight {
    pub structure: BuildingStructure,
    pub ptype: PropertyType,
    pub weight: f64,
}

/// Default label mix: fireproof M dominates, T (steel-like non-communal) is ~3%.
pub fn default_class_mix() -> Vec<ClassWeight> {
    use BuildingStructure::*;
    use PropertyType::*;
    [
        (ConcreteLike, Communal, 0.45),
        (ConcreteLike, NonCommunal, 0.02),
        (SteelLike, Communal, 0.15),
        (SteelLike, NonCommunal, 0.03),
        (WoodenLike, Communal, 0.12),
        (WoodenLike, NonCommunal, 0.23),
    ]
    .into_iter()
    .map(|(structure, ptype, weight)| ClassWeight {
        structure,
        ptype,
        weight,
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_properties: usize,
    /// Inclusive range of images rendered per property.
    pub images_per_property: (usize, usize),
    pub year_range: (i32, i32),
    pub cue_strength: f64,
    pub seed: u64,
    pub class_mix: Vec<ClassWeight>,
    /// Share of properties written with a defect the metadata filter must
    /// catch (pre-1915 year, non-residential category or missing structure).
    pub invalid_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_properties: 1000,
            images_per_property: (1, 3),
            year_range: (MIN_CONSTRUCTION_YEAR, MAX_YEAR),
            cue_strength: 1.0,
            seed: 0,
            class_mix: default_class_mix(),
            invalid_fraction: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.cue_strength) {
            return bad(format!("cue_strength must be in [0, 1], got {}", self.cue_strength));
        }
        if !(0.0..=1.0).contains(&self.invalid_fraction) {
            return bad(format!(
                "invalid_fraction must be in [0, 1], got {}",
                self.invalid_fraction
            ));
        }
        let (lo, hi) = self.year_range;
        if lo < MIN_CONSTRUCTION_YEAR || hi > MAX_YEAR || lo >= hi {
            return bad(format!(
                "year_range must satisfy {MIN_CONSTRUCTION_YEAR} <= start < end <= {MAX_YEAR}, got {lo}..{hi}"
            ));
        }
        let (a, b) = self.images_per_property;
        if a == 0 || a > b {
            return bad(format!("images_per_property must be 1 <= min <= max, got {a}..{b}"));
        }
        if self.class_mix.is_empty()
            || self.class_mix.iter().any(|c| !(c.weight >= 0.0) || !c.weight.is_finite())
            || self.class_mix.iter().map(|c| c.weight).sum::<f64>() <= 0.0
        {
            return bad("class_mix needs non-negative weights with a positive sum".into());
        }
        Ok(())
    }
}

/// Hue angle (degrees) for a year on the configured ramp.
pub fn hue_for_year(year: f64, range: (i32, i32)) -> f64 {
    let t = (year - range.0 as f64) / (range.1 - range.0) as f64;
    HUE_RAMP_DEG.0 + t * (HUE_RAMP_DEG.1 - HUE_RAMP_DEG.0)
}

/// Inverse of [`hue_for_year`].
pub fn year_for_hue(hue_deg: f64, range: (i32, i32)) -> f64 {
    let t = (hue_deg - HUE_RAMP_DEG.0) / (HUE_RAMP_DEG.1 - HUE_RAMP_DEG.0);
    range.0 as f64 + t * (range.1 - range.0) as f64
}

/// Unit chroma direction for a hue, in the plane orthogonal to gray.
pub fn chroma_direction(hue_deg: f64) -> [f64; 3] {
    let (s, c) = hue_deg.to_radians().sin_cos();
    let u = [2.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt()];
    let v = [0.0, 1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
    [c * u[0] + s * v[0], c * u[1] + s * v[1], c * u[2] + s * v[2]]
}

/// Hue angle (degrees) of an RGB color's chroma component.
pub fn hue_of(rgb: [f64; 3]) -> f64 {
    let u = [2.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt(), -1.0 / 6f64.sqrt()];
    let v = [0.0, 1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    dot(rgb, v).atan2(dot(rgb, u)).to_degrees()
}

pub fn floors_for(structure: BuildingStructure) -> std::ops::RangeInclusive<u32> {
    match structure {
        BuildingStructure::WoodenLike => 1..=2,
        BuildingStructure::SteelLike => 3..=4,
        BuildingStructure::ConcreteLike => 5..=7,
    }
}

pub fn width_for(ptype: PropertyType) -> u32 {
    match ptype {
        PropertyType::Communal => 96,
        PropertyType::NonCommunal => 48,
    }
}

/// Rendering parameters of one facade image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FacadeParams {
    pub hue_deg: f64,
    pub floors: u32,
    pub width: u32,
    /// Horizontal shift of the building from center, in pixels.
    pub offset_x: i32,
    /// Additive shift along the gray axis.
    pub brightness: f64,
    pub noise_seed: u64,
}

/// Renders one 128x128 facade.
pub fn render_facade(p: &FacadeParams) -> RgbImage {
    let chroma = chroma_direction(p.hue_deg).map(|c| c * CHROMA);
    let shade = |gray: f64| -> [f64; 3] {
        let g = gray + p.brightness;
        [g + chroma[0], g + chroma[1], g + chroma[2]]
    };
    let sky = shade(0.76);
    let ground = shade(0.36);
    let facade = shade(0.52);
    let roof = shade(0.30);
    let window = shade(0.26);
    let door = shade(0.33);

    let size = IMAGE_SIZE;
    let height = p.floors * FLOOR_HEIGHT + ROOF_BAND;
    let top = GROUND_TOP - height;
    let left = ((size as i32 - p.width as i32) / 2 + p.offset_x).clamp(0, (size - p.width) as i32) as u32;
    let right = left + p.width;
    let cols = p.width / CELL;
    let door_cells: Vec<u32> = if cols >= 6 { vec![1, 3, 5] } else { vec![cols / 2] };

    let pick = |x: u32, y: u32| -> [f64; 3] {
        if y >= GROUND_TOP {
            return ground;
        }
        if x < left || x >= right || y < top {
            return sky;
        }
        if y < top + ROOF_BAND {
            return roof;
        }
        let fy = y - top - ROOF_BAND;
        let floor_from_top = fy / FLOOR_HEIGHT;
        let in_floor = fy % FLOOR_HEIGHT;
        let cell = (x - left) / CELL;
        let in_cell = (x - left) % CELL;
        let ground_floor = floor_from_top + 1 == p.floors;
        if ground_floor && door_cells.contains(&cell) {
            return if (4..12).contains(&in_cell) && in_floor >= 2 { door } else { facade };
        }
        if (4..12).contains(&in_cell) && (3..9).contains(&in_floor) {
            return window;
        }
        facade
    };

    let mut rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
    RgbImage::from_fn(size, size, |x, y| {
        let c = pick(x, y);
        let mut px = [0u8; 3];
        for (o, v) in px.iter_mut().zip(c) {
            let n: f64 = rng.gen_range(-3.0..=3.0);
            *o = (v * 255.0 + n).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// A property drawn by the generator, with the cue values actually rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthProperty {
    pub property_id: String,
    pub construction_year: i32,
    pub structure: BuildingStructure,
    pub category: RawPropertyCategory,
    pub ptype: PropertyType,
    pub defect: Option<Defect>,
    pub cue_year: f64,
    pub cue_floors: u32,
    pub cue_width: u32,
    pub images: Vec<FacadeParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defect {
    Pre1915(i32),
    NonResidential,
    MissingStructure,
}

fn pick_category(ptype: PropertyType, rng: &mut ChaCha8Rng) -> RawPropertyCategory {
    let r: f64 = rng.gen();
    match ptype {
        PropertyType::Communal => match r {
            r if r < 0.8 => RawPropertyCategory::Apartment,
            r if r < 0.9 => RawPropertyCategory::Dormitory,
            _ => RawPropertyCategory::Sublease,
        },
        PropertyType::NonCommunal => match r {
            r if r < 0.5 => RawPropertyCategory::SingleFamilyHouse,
            r if r < 0.8 => RawPropertyCategory::House,
            r if r < 0.9 => RawPropertyCategory::TerraceHouse,
            _ => RawPropertyCategory::Townhouse,
        },
    }
}

/// Draws property `index` of the corpus. Pure in (spec, index).
pub fn draw_property(spec: &SynthSpec, index: usize) -> SynthProperty {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let weights = WeightedIndex::new(spec.class_mix.iter().map(|c| c.weight))
        .expect("class mix validated");
    let class = &spec.class_mix[weights.sample(&mut rng)];
    let (structure, ptype) = (class.structure, class.ptype);
    let (lo, hi) = spec.year_range;
    let year = rng.gen_range(lo..=hi);
    let category = pick_category(ptype, &mut rng);

    let defect = if rng.gen_bool(spec.invalid_fraction) {
        Some(match rng.gen_range(0..3) {
            0 => Defect::Pre1915(rng.gen_range(1880..MIN_CONSTRUCTION_YEAR)),
            1 => Defect::NonResidential,
            _ => Defect::MissingStructure,
        })
    } else {
        None
    };

    let keep = |rng: &mut ChaCha8Rng| rng.gen_bool(spec.cue_strength);
    let cue_year = if keep(&mut rng) {
        year as f64
    } else {
        rng.gen_range(lo as f64..=hi as f64)
    };
    let floor_structure = if keep(&mut rng) {
        structure
    } else {
        BuildingStructure::ALL[rng.gen_range(0..3)]
    };
    let cue_floors = rng.gen_range(floors_for(floor_structure));
    let width_ptype = if keep(&mut rng) {
        ptype
    } else {
        PropertyType::ALL[rng.gen_range(0..2)]
    };
    let cue_width = width_for(width_ptype);

    let (min_i, max_i) = spec.images_per_property;
    let n_images = rng.gen_range(min_i..=max_i);
    let hue = hue_for_year(cue_year, spec.year_range);
    let images = (0..n_images)
        .map(|_| FacadeParams {
            hue_deg: hue,
            floors: cue_floors,
            width: cue_width,
            offset_x: rng.gen_range(-8..=8),
            brightness: rng.gen_range(-0.04..=0.04),
            noise_seed: rng.gen(),
        })
        .collect();

    SynthProperty {
        property_id: format!("p{index:06}"),
        construction_year: match defect {
            Some(Defect::Pre1915(y)) => y,
            _ => year,
        },
        structure,
        category: match defect {
            Some(Defect::NonResidential) => RawPropertyCategory::Other("Office".into()),
            _ => category,
        },
        ptype,
        defect,
        cue_year,
        cue_floors,
        cue_width,
        images,
    }
}

#[derive(Serialize)]
struct PropertyLine<'a> {
    property_id: &'a str,
    construction_year: i32,
    structure: Option<&'static str>,
    category: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    ptype: Option<PropertyType>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fireproof: Option<crate::rules::FireproofClass>,
}

#[derive(Serialize)]
struct ImageLine {
    image_id: String,
    property_id: String,
    path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSummary {
    pub properties_path: PathBuf,
    pub images_path: PathBuf,
    pub n_properties: usize,
    pub n_images: usize,
}

pub const PROPERTIES_FILE: &str = "properties.jsonl";
pub const IMAGES_FILE: &str = "images.jsonl";

/// Renders the corpus into `out_dir`: `properties.jsonl`, `images.jsonl` and
/// `images/<image_id>.png`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut prop_text = String::new();
    let mut image_text = String::new();
    let mut n_images = 0;
    for i in 0..spec.n_properties {
        let p = draw_property(spec, i);
        let derivable = !matches!(
            p.defect,
            Some(Defect::NonResidential) | Some(Defect::MissingStructure)
        );
        let line = PropertyLine {
            property_id: &p.property_id,
            construction_year: p.construction_year,
            structure: match p.defect {
                Some(Defect::MissingStructure) => None,
                _ => Some(p.structure.as_str()),
            },
            category: p.category.as_str(),
            ptype: derivable.then_some(p.ptype),
            fireproof: derivable.then(|| fireproof_class(p.structure, p.ptype)),
        };
        prop_text.push_str(&serde_json::to_string(&line).expect("serializable"));
        prop_text.push('\n');

        for (k, params) in p.images.iter().enumerate() {
            let image_id = format!("{}_{k}", p.property_id);
            let rel = format!("images/{image_id}.png");
            let path = out_dir.join(&rel);
            render_facade(params).save(&path).map_err(|e| Error::ImageEncode {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let line = ImageLine {
                image_id,
                property_id: p.property_id.clone(),
                path: rel,
            };
            image_text.push_str(&serde_json::to_string(&line).expect("serializable"));
            image_text.push('\n');
            n_images += 1;
        }
    }
    let properties_path = out_dir.join(PROPERTIES_FILE);
    let images_path = out_dir.join(IMAGES_FILE);
    fs::write(&properties_path, prop_text).map_err(|e| Error::io(&properties_path, e))?;
    fs::write(&images_path, image_text).map_err(|e| Error::io(&images_path, e))?;
    Ok(SynthSummary {
        properties_path,
        images_path,
        n_properties: spec.n_properties,
        n_images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::FireproofClass;

    #[test]
    fn hue_ramp_endpoints() {
        let r = (1915, 2025);
        assert_eq!(hue_for_year(1915.0, r), HUE_RAMP_DEG.0);
        assert_eq!(hue_for_year(2025.0, r), HUE_RAMP_DEG.1);
        assert!((year_for_hue(hue_for_year(1987.0, r), r) - 1987.0).abs() < 1e-9);
    }

    #[test]
    fn rendered_hue_recovers_year_hue() {
        for year in [1915, 1960, 2025] {
            let hue = hue_for_year(year as f64, (1915, 2025));
            let img = render_facade(&FacadeParams {
                hue_deg: hue,
                floors: 3,
                width: 48,
                offset_x: 0,
                brightness: 0.0,
                noise_seed: 1,
            });
            let n = (img.width() * img.height()) as f64;
            let mut mean = [0.0; 3];
            for p in img.pixels() {
                for (m, &v) in mean.iter_mut().zip(&p.0) {
                    *m += v as f64 / 255.0 / n;
                }
            }
            let got = hue_of(mean);
            let diff = (got - hue + 540.0).rem_euclid(360.0) - 180.0;
            assert!(diff.abs() < 2.0, "year {year}: {got} vs {hue}");
        }
    }

    #[test]
    fn spec_validation() {
        let ok = SynthSpec::default();
        assert!(ok.validate().is_ok());
        assert!(SynthSpec { cue_strength: 1.5, ..ok.clone() }.validate().is_err());
        assert!(SynthSpec { year_range: (1900, 2000), ..ok.clone() }.validate().is_err());
        assert!(SynthSpec { images_per_property: (0, 2), ..ok.clone() }.validate().is_err());
        assert!(SynthSpec { class_mix: vec![], ..ok }.validate().is_err());
    }

    #[test]
    fn draws_are_pure_per_index() {
        let spec = SynthSpec {
            seed: 7,
            ..Default::default()
        };
        assert_eq!(draw_property(&spec, 12), draw_property(&spec, 12));
        assert_ne!(draw_property(&spec, 12), draw_property(&spec, 13));
    }

    #[test]
    fn cue_strength_one_renders_the_labels() {
        let spec = SynthSpec {
            seed: 3,
            ..Default::default()
        };
        for i in 0..200 {
            let p = draw_property(&spec, i);
            assert_eq!(p.cue_year, p.construction_year as f64);
            assert!(floors_for(p.structure).contains(&p.cue_floors));
            assert_eq!(p.cue_width, width_for(p.ptype));
        }
    }

    #[test]
    fn t_class_is_rare_by_default() {
        // Counted from the drawn labels of 1,000 properties.
        let spec = SynthSpec {
            seed: 11,
            n_properties: 1000,
            ..Default::default()
        };
        let t = (0..1000)
            .map(|i| draw_property(&spec, i))
            .filter(|p| fireproof_class(p.structure, p.ptype) == FireproofClass::T)
            .count();
        assert!(t < 50, "T share {t}/1000");
        assert!(t > 0);
    }

    #[test]
    fn generate_is_deterministic() {
        let spec = SynthSpec {
            seed: 7,
            n_properties: 12,
            invalid_fraction: 0.3,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = generate(&spec, a.path()).unwrap();
        let sb = generate(&spec, b.path()).unwrap();
        assert_eq!(sa.n_images, sb.n_images);
        for f in [PROPERTIES_FILE, IMAGES_FILE, "images/p000000_0.png"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }
}

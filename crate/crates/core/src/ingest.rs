//! Manifest parsing, metadata filtering and the property-level train/test split.
//!
//! Manifests are JSON Lines files. A property line carries `property_id`,
//! `construction_year`, `structure` and `category`; an image line carries
//! `image_id`, `property_id` and `path`. Image paths are resolved against the
//! directory holding the manifest.
//!
//! A required key that is absent is a schema violation and the line is
//! reported. A key that is present with `null` or an empty string is a missing
//! value; the record parses and is later dropped by [`filter_metadata`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::dedup::CategoryVerdict;
use crate::error::{Error, Result};
use crate::rules::{
    fireproof_class, raw_category_to_property_type, BuildingStructure, FireproofClass,
    PropertyType, RawPropertyCategory,
};

/// Earliest construction year kept by [`filter_metadata`].
pub const MIN_CONSTRUCTION_YEAR: i32 = 1915;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// A property line as parsed, before validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPropertyRecord {
    pub property_id: String,
    pub construction_year: Option<i32>,
    pub structure: Option<String>,
    pub category: Option<String>,
}

/// A validated property with derived labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyRecord {
    pub property_id: String,
    pub construction_year: i32,
    pub structure: BuildingStructure,
    #[serde(rename = "category")]
    pub raw_category: RawPropertyCategory,
    pub ptype: PropertyType,
    pub fireproof: FireproofClass,
}

impl From<&PropertyRecord> for RawPropertyRecord {
    fn from(r: &PropertyRecord) -> Self {
        RawPropertyRecord {
            property_id: r.property_id.clone(),
            construction_year: Some(r.construction_year),
            structure: Some(r.structure.as_str().to_string()),
            category: Some(r.raw_category.as_str().to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub property_id: String,
    /// Absolute, or relative to the current directory if the manifest path was.
    pub path: PathBuf,
    pub phash: Option<u64>,
    pub category_verdict: Option<CategoryVerdict>,
}

/// A problem with one manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(field) => write!(f, "line {}: `{}`: {}", self.line, field, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

#[derive(Debug, Default)]
pub struct Manifest {
    pub properties: Vec<RawPropertyRecord>,
    pub images: Vec<ImageRecord>,
    pub property_diagnostics: Vec<Diagnostic>,
    pub image_diagnostics: Vec<Diagnostic>,
}

/// Loads a property manifest and an image manifest.
pub fn load_manifest(properties: &Path, images: &Path) -> Result<Manifest> {
    let (properties, property_diagnostics) = load_properties(properties)?;
    let (images, image_diagnostics) = load_images(images)?;
    Ok(Manifest {
        properties,
        images,
        property_diagnostics,
        image_diagnostics,
    })
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_object(line: &str, lineno: usize) -> std::result::Result<Map<String, Value>, Diagnostic> {
    match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Diagnostic {
            line: lineno,
            field: None,
            message: "expected a JSON object".into(),
        }),
        Err(e) => Err(Diagnostic {
            line: lineno,
            field: None,
            message: format!("malformed JSON: {e}"),
        }),
    }
}

/// `Ok(None)` for null or empty; `Err` when the key is absent or mistyped.
fn string_field(
    map: &Map<String, Value>,
    key: &str,
    lineno: usize,
) -> std::result::Result<Option<String>, Diagnostic> {
    let diag = |message: &str| Diagnostic {
        line: lineno,
        field: Some(key.to_string()),
        message: message.to_string(),
    };
    match map.get(key) {
        None => Err(diag("missing required field")),
        Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.trim().is_empty() => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        // Ids are opaque; accept bare numbers.
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(_) => Err(diag("expected a string")),
    }
}

fn year_field(
    map: &Map<String, Value>,
    key: &str,
    lineno: usize,
) -> std::result::Result<Option<i32>, Diagnostic> {
    let diag = |message: &str| Diagnostic {
        line: lineno,
        field: Some(key.to_string()),
        message: message.to_string(),
    };
    match map.get(key) {
        None => Err(diag("missing required field")),
        Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n
            .as_i64()
            .and_then(|v| i32::try_from(v).ok())
            .map(Some)
            .ok_or_else(|| diag("expected an integer year")),
        Some(Value::String(s)) if s.trim().is_empty() => Ok(None),
        Some(Value::String(s)) => s
            .trim()
            .parse::<i32>()
            .map(Some)
            .map_err(|_| diag("expected an integer year")),
        Some(_) => Err(diag("expected an integer year")),
    }
}

fn required_string(
    map: &Map<String, Value>,
    key: &str,
    lineno: usize,
) -> std::result::Result<String, Diagnostic> {
    string_field(map, key, lineno)?.ok_or_else(|| Diagnostic {
        line: lineno,
        field: Some(key.to_string()),
        message: "empty value".into(),
    })
}

fn parse_property_line(line: &str, lineno: usize) -> std::result::Result<RawPropertyRecord, Diagnostic> {
    let map = parse_object(line, lineno)?;
    Ok(RawPropertyRecord {
        property_id: required_string(&map, "property_id", lineno)?,
        construction_year: year_field(&map, "construction_year", lineno)?,
        structure: string_field(&map, "structure", lineno)?,
        category: string_field(&map, "category", lineno)?,
    })
}

/// Parses a property manifest; bad lines become diagnostics.
pub fn load_properties(path: &Path) -> Result<(Vec<RawPropertyRecord>, Vec<Diagnostic>)> {
    let text = read_lines(path)?;
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_property_line(line, i + 1) {
            Ok(r) => records.push(r),
            Err(d) => diagnostics.push(d),
        }
    }
    Ok((records, diagnostics))
}

fn absolute_dir_of(path: &Path) -> Result<PathBuf> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let dir = if dir.as_os_str().is_empty() {
        Path::new(".")
    } else {
        dir
    };
    std::path::absolute(dir).map_err(|e| Error::io(dir, e))
}

fn parse_image_line(
    line: &str,
    lineno: usize,
    base: &Path,
) -> std::result::Result<ImageRecord, Diagnostic> {
    let map = parse_object(line, lineno)?;
    let image_id = required_string(&map, "image_id", lineno)?;
    let property_id = required_string(&map, "property_id", lineno)?;
    let rel = required_string(&map, "path", lineno)?;
    let phash = match string_field(&map, "phash", lineno) {
        Ok(Some(hex)) => Some(u64::from_str_radix(&hex, 16).map_err(|_| Diagnostic {
            line: lineno,
            field: Some("phash".into()),
            message: "expected 16 hex digits".into(),
        })?),
        _ => None,
    };
    let category_verdict = match map.get("category_verdict") {
        Some(v @ Value::String(_)) => Some(serde_json::from_value(v.clone()).map_err(|_| {
            Diagnostic {
                line: lineno,
                field: Some("category_verdict".into()),
                message: "unknown verdict".into(),
            }
        })?),
        _ => None,
    };
    Ok(ImageRecord {
        image_id,
        property_id,
        path: base.join(rel),
        phash,
        category_verdict,
    })
}

/// Parses an image manifest; bad lines become diagnostics.
pub fn load_images(path: &Path) -> Result<(Vec<ImageRecord>, Vec<Diagnostic>)> {
    let text = read_lines(path)?;
    let base = absolute_dir_of(path)?;
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_image_line(line, i + 1, &base) {
            Ok(r) => records.push(r),
            Err(d) => diagnostics.push(d),
        }
    }
    Ok((records, diagnostics))
}

/// Why a property was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MissingValue,
    #[serde(rename = "pre_1915")]
    Pre1915,
    NonResidential,
    UnknownStructure,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::MissingValue => "missing_value",
            RejectReason::Pre1915 => "pre_1915",
            RejectReason::NonResidential => "non_residential",
            RejectReason::UnknownStructure => "unknown_structure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub property_id: String,
    pub reason: RejectReason,
}

#[derive(Debug, Default)]
pub struct FilterOutcome {
    pub retained: Vec<PropertyRecord>,
    pub rejected: Vec<Rejection>,
}

fn validate(r: &RawPropertyRecord) -> std::result::Result<PropertyRecord, RejectReason> {
    let (Some(year), Some(structure), Some(category)) =
        (r.construction_year, r.structure.as_deref(), r.category.as_deref())
    else {
        return Err(RejectReason::MissingValue);
    };
    if year < MIN_CONSTRUCTION_YEAR {
        return Err(RejectReason::Pre1915);
    }
    let raw_category = RawPropertyCategory::parse(category);
    let ptype =
        raw_category_to_property_type(&raw_category).map_err(|_| RejectReason::NonResidential)?;
    let structure = BuildingStructure::from_raw(structure).ok_or(RejectReason::UnknownStructure)?;
    Ok(PropertyRecord {
        property_id: r.property_id.clone(),
        construction_year: year,
        structure,
        raw_category,
        ptype,
        fireproof: fireproof_class(structure, ptype),
    })
}

/// Drops records with a missing target, a pre-1915 year, a non-residential
/// category or an unrecognized structure. Each drop is logged with one reason.
pub fn filter_metadata(records: &[RawPropertyRecord]) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for r in records {
        match validate(r) {
            Ok(p) => out.retained.push(p),
            Err(reason) => out.rejected.push(Rejection {
                property_id: r.property_id.clone(),
                reason,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageRejection {
    pub image_id: String,
    pub reason: String,
}

/// Keeps images whose property survived filtering.
pub fn filter_images(
    images: Vec<ImageRecord>,
    retained: &[PropertyRecord],
) -> (Vec<ImageRecord>, Vec<ImageRejection>) {
    let ids: HashSet<&str> = retained.iter().map(|p| p.property_id.as_str()).collect();
    let (keep, drop): (Vec<_>, Vec<_>) = images
        .into_iter()
        .partition(|im| ids.contains(im.property_id.as_str()));
    let rejected = drop
        .into_iter()
        .map(|im| ImageRejection {
            image_id: im.image_id,
            reason: "orphan_property".into(),
        })
        .collect();
    (keep, rejected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub train_fraction: f64,
    pub assignments: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, property_id: &str) -> Option<Split> {
        self.assignments.get(property_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignments.values().filter(|s| **s == split).count()
    }

    pub fn realized_train_fraction(&self) -> f64 {
        if self.assignments.is_empty() {
            return 0.0;
        }
        self.count(Split::Train) as f64 / self.assignments.len() as f64
    }

    /// Splits images by their property's assignment.
    pub fn partition_images<'a>(
        &self,
        images: &'a [ImageRecord],
    ) -> Result<(Vec<&'a ImageRecord>, Vec<&'a ImageRecord>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for im in images {
            match self.get(&im.property_id) {
                Some(Split::Train) => train.push(im),
                Some(Split::Test) => test.push(im),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "image `{}` belongs to unassigned property `{}`",
                        im.image_id, im.property_id
                    )))
                }
            }
        }
        Ok((train, test))
    }

    /// One `property_id<TAB>train|test` line per property, sorted by id.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (id, split) in &self.assignments {
            s.push_str(id);
            s.push('\t');
            s.push_str(split.as_str());
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Reads a split file. Seed and fraction are not stored and come back as 0.
    pub fn read(path: &Path) -> Result<Self> {
        let text = read_lines(path)?;
        let mut assignments = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (id, split) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `property_id<TAB>train|test`".into()))?;
            let split: Split = split.parse().map_err(|e: Error| parse_err(e.to_string()))?;
            if assignments.insert(id.to_string(), split).is_some() {
                return Err(Error::DuplicateProperty(id.to_string()));
            }
        }
        let mut a = SplitAssignment {
            seed: 0,
            train_fraction: 0.0,
            assignments,
        };
        a.train_fraction = a.realized_train_fraction();
        Ok(a)
    }
}

/// Uniform draw in [0, 1) from a stable hash of (seed, property id).
pub fn split_unit(seed: u64, property_id: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(property_id.as_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
}

/// Assigns each property to train or test by thresholding [`split_unit`].
///
/// A property's side depends only on the seed and its own id, so appending
/// records never moves existing properties.
pub fn split_properties(
    records: &[PropertyRecord],
    seed: u64,
    train_fraction: f64,
) -> Result<SplitAssignment> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut assignments = BTreeMap::new();
    for r in records {
        let split = if split_unit(seed, &r.property_id) < train_fraction {
            Split::Train
        } else {
            Split::Test
        };
        if assignments.insert(r.property_id.clone(), split).is_some() {
            return Err(Error::DuplicateProperty(r.property_id.clone()));
        }
    }
    Ok(SplitAssignment {
        seed,
        train_fraction,
        assignments,
    })
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes any serializable records as JSON Lines.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_lines(path, items)
}

pub fn write_properties(path: &Path, records: &[PropertyRecord]) -> Result<()> {
    write_lines(path, records)
}

#[derive(Serialize)]
struct ImageLine<'a> {
    image_id: &'a str,
    property_id: &'a str,
    path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    phash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    category_verdict: Option<CategoryVerdict>,
}

/// Writes an image manifest with paths relative to the manifest's directory.
pub fn write_images(path: &Path, images: &[ImageRecord]) -> Result<()> {
    let base = absolute_dir_of(path)?;
    let mut lines = Vec::with_capacity(images.len());
    for im in images {
        let abs = std::path::absolute(&im.path).map_err(|e| Error::io(&im.path, e))?;
        let rel = pathdiff::diff_paths(&abs, &base).unwrap_or(abs);
        lines.push(ImageLine {
            image_id: &im.image_id,
            property_id: &im.property_id,
            path: rel.to_string_lossy().replace('\\', "/"),
            phash: im.phash.map(|h| format!("{h:016x}")),
            category_verdict: im.category_verdict,
        });
    }
    write_lines(path, lines)
}

/// Loads a filtered property manifest into validated records keyed by id.
pub fn load_property_index(path: &Path) -> Result<HashMap<String, PropertyRecord>> {
    let (raw, diags) = load_properties(path)?;
    if let Some(d) = diags.first() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: d.line,
            message: d.to_string(),
        });
    }
    let filtered = filter_metadata(&raw);
    let mut index = HashMap::with_capacity(filtered.retained.len());
    for p in filtered.retained {
        if index.contains_key(&p.property_id) {
            return Err(Error::DuplicateProperty(p.property_id));
        }
        index.insert(p.property_id.clone(), p);
    }
    Ok(index)
}

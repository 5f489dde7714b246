//! Label taxonomies and the rule-based fireproof mapping.
//!
//! The fireproof class is never predicted directly. It is always derived from
//! a building structure and a property type through [`fireproof_class`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Material bucket of the load-bearing construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildingStructure {
    ConcreteLike,
    SteelLike,
    WoodenLike,
}

impl BuildingStructure {
    /// Class order used by the structure head and its confusion matrix.
    pub const ALL: [BuildingStructure; 3] = [
        BuildingStructure::ConcreteLike,
        BuildingStructure::SteelLike,
        BuildingStructure::WoodenLike,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BuildingStructure::ConcreteLike => "concrete_like",
            BuildingStructure::SteelLike => "steel_like",
            BuildingStructure::WoodenLike => "wooden_like",
        }
    }

    /// Groups a raw structure string into one of the three buckets.
    ///
    /// Accepts the manifest labels plus a handful of common listing spellings
    /// (RC, SRC, steel frame, timber, ...). Returns `None` for anything else.
    pub fn from_raw(raw: &str) -> Option<Self> {
        let key = normalize_key(raw);
        let s = match key.as_str() {
            "concrete_like" | "concrete" | "rc" | "src" | "reinforced_concrete"
            | "steel_reinforced_concrete" | "pc" | "precast_concrete" | "alc" => {
                BuildingStructure::ConcreteLike
            }
            "steel_like" | "steel" | "s" | "steel_frame" | "light_steel" | "heavy_steel"
            | "light_gauge_steel" => BuildingStructure::SteelLike,
            "wooden_like" | "wooden" | "wood" | "w" | "timber" | "timber_frame" => {
                BuildingStructure::WoodenLike
            }
            _ => return None,
        };
        Some(s)
    }
}

impl fmt::Display for BuildingStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BuildingStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_raw(s).ok_or_else(|| Error::UnknownLabel {
            kind: "structure",
            value: s.to_string(),
        })
    }
}

/// Communal (multi-unit) or non-communal (single-unit) dwelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyType {
    Communal,
    NonCommunal,
}

impl PropertyType {
    pub const ALL: [PropertyType; 2] = [PropertyType::Communal, PropertyType::NonCommunal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PropertyType::Communal => "communal",
            PropertyType::NonCommunal => "non_communal",
        }
    }
}

impl fmt::Display for PropertyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PropertyType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize_key(s).as_str() {
            "communal" => Ok(PropertyType::Communal),
            "non_communal" => Ok(PropertyType::NonCommunal),
            _ => Err(Error::UnknownLabel {
                kind: "property type",
                value: s.to_string(),
            }),
        }
    }
}

/// Insurance fireproof class: H (non-fireproof), T (semi-fireproof), M (fireproof).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FireproofClass {
    H,
    T,
    M,
}

impl FireproofClass {
    pub const ALL: [FireproofClass; 3] = [FireproofClass::H, FireproofClass::T, FireproofClass::M];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FireproofClass::H => "H",
            FireproofClass::T => "T",
            FireproofClass::M => "M",
        }
    }
}

impl fmt::Display for FireproofClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FireproofClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "H" => Ok(FireproofClass::H),
            "T" => Ok(FireproofClass::T),
            "M" => Ok(FireproofClass::M),
            _ => Err(Error::UnknownLabel {
                kind: "fireproof class",
                value: s.to_string(),
            }),
        }
    }
}

/// Property category as it appears in listing metadata.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RawPropertyCategory {
    Apartment,
    House,
    SingleFamilyHouse,
    TerraceHouse,
    Townhouse,
    Sublease,
    Dormitory,
    Other(String),
}

impl RawPropertyCategory {
    /// Parses a metadata string. Unrecognized text becomes `Other`.
    pub fn parse(raw: &str) -> Self {
        match normalize_key(raw).as_str() {
            "apartment" => RawPropertyCategory::Apartment,
            "house" => RawPropertyCategory::House,
            "single_family_house" | "singlefamilyhouse" => RawPropertyCategory::SingleFamilyHouse,
            "terrace_house" | "terracehouse" => RawPropertyCategory::TerraceHouse,
            "townhouse" | "town_house" => RawPropertyCategory::Townhouse,
            "sublease" => RawPropertyCategory::Sublease,
            "dormitory" => RawPropertyCategory::Dormitory,
            _ => RawPropertyCategory::Other(raw.trim().to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            RawPropertyCategory::Apartment => "apartment",
            RawPropertyCategory::House => "house",
            RawPropertyCategory::SingleFamilyHouse => "single_family_house",
            RawPropertyCategory::TerraceHouse => "terrace_house",
            RawPropertyCategory::Townhouse => "townhouse",
            RawPropertyCategory::Sublease => "sublease",
            RawPropertyCategory::Dormitory => "dormitory",
            RawPropertyCategory::Other(text) => text,
        }
    }

    pub fn is_residential(&self) -> bool {
        !matches!(self, RawPropertyCategory::Other(_))
    }
}

impl fmt::Display for RawPropertyCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for RawPropertyCategory {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RawPropertyCategory {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(RawPropertyCategory::parse(&s))
    }
}

fn normalize_key(raw: &str) -> String {
    raw.trim()
        .chars()
        .map(|c| match c {
            ' ' | '-' => '_',
            c => c.to_ascii_lowercase(),
        })
        .collect()
}

/// Maps a whitelisted category to its property type.
///
/// Multi-unit categories (apartment, dormitory, sublease) are communal; single-unit
/// dwellings are non-communal. `Other` is rejected and the record must be dropped.
pub fn raw_category_to_property_type(cat: &RawPropertyCategory) -> Result<PropertyType, Error> {
    match cat {
        RawPropertyCategory::Apartment
        | RawPropertyCategory::Dormitory
        | RawPropertyCategory::Sublease => Ok(PropertyType::Communal),
        RawPropertyCategory::House
        | RawPropertyCategory::SingleFamilyHouse
        | RawPropertyCategory::TerraceHouse
        | RawPropertyCategory::Townhouse => Ok(PropertyType::NonCommunal),
        RawPropertyCategory::Other(text) => Err(Error::NonResidential(text.clone())),
    }
}

/// Derives the fireproof class from structure and property type.
pub fn fireproof_class(structure: BuildingStructure, ptype: PropertyType) -> FireproofClass {
    match (structure, ptype) {
        (BuildingStructure::ConcreteLike, _) => FireproofClass::M,
        (BuildingStructure::SteelLike, PropertyType::Communal) => FireproofClass::M,
        (BuildingStructure::SteelLike, PropertyType::NonCommunal) => FireproofClass::T,
        (BuildingStructure::WoodenLike, _) => FireproofClass::H,
    }
}

/// Property-type column of a mapping row; `Any` matches both types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropertyScope {
    Any,
    Only(PropertyType),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappingRow {
    pub structure: BuildingStructure,
    pub scope: PropertyScope,
    pub class: FireproofClass,
}

/// The published mapping, row for row.
pub const FIREPROOF_TABLE: [MappingRow; 4] = [
    MappingRow {
        structure: BuildingStructure::ConcreteLike,
        scope: PropertyScope::Any,
        class: FireproofClass::M,
    },
    MappingRow {
        structure: BuildingStructure::SteelLike,
        scope: PropertyScope::Only(PropertyType::Communal),
        class: FireproofClass::M,
    },
    MappingRow {
        structure: BuildingStructure::SteelLike,
        scope: PropertyScope::Only(PropertyType::NonCommunal),
        class: FireproofClass::T,
    },
    MappingRow {
        structure: BuildingStructure::WoodenLike,
        scope: PropertyScope::Any,
        class: FireproofClass::H,
    },
];

/// [`FIREPROOF_TABLE`] with every `Any` row expanded to both property types.
pub fn expanded_table() -> Vec<(BuildingStructure, PropertyType, FireproofClass)> {
    let mut out = Vec::with_capacity(6);
    for row in FIREPROOF_TABLE {
        match row.scope {
            PropertyScope::Any => {
                for p in PropertyType::ALL {
                    out.push((row.structure, p, row.class));
                }
            }
            PropertyScope::Only(p) => out.push((row.structure, p, row.class)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        use BuildingStructure::*;
        use PropertyType::*;
        assert_eq!(fireproof_class(ConcreteLike, NonCommunal), FireproofClass::M);
        assert_eq!(fireproof_class(SteelLike, NonCommunal), FireproofClass::T);
        assert_eq!(fireproof_class(WoodenLike, Communal), FireproofClass::H);
        assert_eq!(fireproof_class(SteelLike, Communal), FireproofClass::M);
    }

    #[test]
    fn expanded_table_matches_rule_and_counts() {
        let table = expanded_table();
        assert_eq!(table.len(), 6);
        for (s, p, c) in &table {
            assert_eq!(fireproof_class(*s, *p), *c);
        }
        let count = |c| table.iter().filter(|r| r.2 == c).count();
        assert_eq!(count(FireproofClass::M), 3);
        assert_eq!(count(FireproofClass::T), 1);
        assert_eq!(count(FireproofClass::H), 2);
    }

    #[test]
    fn severity_proxy() {
        for p in PropertyType::ALL {
            assert_eq!(fireproof_class(BuildingStructure::WoodenLike, p), FireproofClass::H);
            assert_eq!(fireproof_class(BuildingStructure::ConcreteLike, p), FireproofClass::M);
        }
    }

    #[test]
    fn category_mapping() {
        assert_eq!(
            raw_category_to_property_type(&RawPropertyCategory::Apartment).unwrap(),
            PropertyType::Communal
        );
        assert_eq!(
            raw_category_to_property_type(&RawPropertyCategory::SingleFamilyHouse).unwrap(),
            PropertyType::NonCommunal
        );
        let office = RawPropertyCategory::Other("Office".into());
        assert!(matches!(
            raw_category_to_property_type(&office),
            Err(Error::NonResidential(ref s)) if s == "Office"
        ));
    }

    #[test]
    fn category_parsing_is_lenient_about_spelling() {
        assert_eq!(
            RawPropertyCategory::parse("Single-family house"),
            RawPropertyCategory::SingleFamilyHouse
        );
        assert_eq!(RawPropertyCategory::parse("Terrace house"), RawPropertyCategory::TerraceHouse);
        assert_eq!(RawPropertyCategory::parse(" Dormitory "), RawPropertyCategory::Dormitory);
        assert_eq!(
            RawPropertyCategory::parse("Office"),
            RawPropertyCategory::Other("Office".into())
        );
    }

    #[test]
    fn label_strings() {
        let json = serde_json::to_string(&BuildingStructure::ConcreteLike).unwrap();
        assert_eq!(json, "\"concrete_like\"");
        let json = serde_json::to_string(&PropertyType::NonCommunal).unwrap();
        assert_eq!(json, "\"non_communal\"");
        let json = serde_json::to_string(&FireproofClass::T).unwrap();
        assert_eq!(json, "\"T\"");
        for s in BuildingStructure::ALL {
            assert_eq!(s.as_str().parse::<BuildingStructure>().unwrap(), s);
        }
        for p in PropertyType::ALL {
            assert_eq!(p.as_str().parse::<PropertyType>().unwrap(), p);
        }
        for c in FireproofClass::ALL {
            assert_eq!(c.as_str().parse::<FireproofClass>().unwrap(), c);
        }
        assert_eq!(BuildingStructure::from_raw("RC"), Some(BuildingStructure::ConcreteLike));
        assert_eq!(BuildingStructure::from_raw("marble"), None);
    }
}

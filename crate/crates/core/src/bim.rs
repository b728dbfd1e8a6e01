//! Building inventory data model and source merging.
//!
//! An [`Inventory`] is a set of [`BuildingRecord`]s sharing an attribute
//! schema. Every stored attribute carries a [`Provenance`] telling where the
//! value came from: tax-record metadata, a vision model, or spatial
//! imputation. Inventories are immutable once built; every operation returns
//! a new value.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::surf::geo::haversine_distance;

/// Geocodes of the same building from two sources farther apart than this are
/// reported as a conflict.
pub const GEOCODE_CONFLICT_M: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BimError {
    #[error("invalid geocode ({lat}, {lon})")]
    InvalidGeocode { lat: f64, lon: f64 },
    #[error("numeric attribute value must be finite, got {0}")]
    NonFinite(f64),
    #[error("categorical label must be non-empty")]
    EmptyLabel,
    #[error("vision confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("imputation uncertainty {0} must be non-negative")]
    InvalidUncertainty(f64),
    #[error("duplicate building id `{0}`")]
    DuplicateId(String),
    #[error("record `{id}`: attribute `{attribute}` is not in the schema")]
    UnknownAttribute { id: String, attribute: String },
    #[error("record `{id}`: attribute `{attribute}` should be {expected}")]
    KindMismatch {
        id: String,
        attribute: String,
        expected: AttributeKind,
    },
    #[error("schema conflict on attribute `{attribute}`: {left} vs {right}")]
    SchemaConflict {
        attribute: String,
        left: AttributeKind,
        right: AttributeKind,
    },
    #[error("geocode conflicts over {GEOCODE_CONFLICT_M} m for ids: {}", .0.join(", "))]
    GeocodeConflict(Vec<String>),
    #[error("attribute `{0}` is not in the schema")]
    NoSuchAttribute(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeocode")]
pub struct Geocode {
    lat: f64,
    lon: f64,
}

#[derive(Deserialize)]
struct RawGeocode {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawGeocode> for Geocode {
    type Error = BimError;
    fn try_from(raw: RawGeocode) -> Result<Self, BimError> {
        Geocode::new(raw.lat, raw.lon)
    }
}

impl Geocode {
    pub fn new(lat: f64, lon: f64) -> Result<Self, BimError> {
        if lat.is_finite() && lon.is_finite() && (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon) {
            Ok(Self { lat, lon })
        } else {
            Err(BimError::InvalidGeocode { lat, lon })
        }
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Numeric,
    Categorical,
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeKind::Numeric => f.write_str("numeric"),
            AttributeKind::Categorical => f.write_str("categorical"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttributeValue {
    Numeric {
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unit: Option<String>,
    },
    Categorical { label: String },
}

impl AttributeValue {
    pub fn numeric(value: f64) -> Result<Self, BimError> {
        Self::numeric_with_unit(value, None)
    }

    pub fn numeric_with_unit(value: f64, unit: Option<String>) -> Result<Self, BimError> {
        if value.is_finite() {
            Ok(AttributeValue::Numeric { value, unit })
        } else {
            Err(BimError::NonFinite(value))
        }
    }

    pub fn categorical(label: impl Into<String>) -> Result<Self, BimError> {
        let label = label.into();
        if label.is_empty() {
            Err(BimError::EmptyLabel)
        } else {
            Ok(AttributeValue::Categorical { label })
        }
    }

    pub fn kind(&self) -> AttributeKind {
        match self {
            AttributeValue::Numeric { .. } => AttributeKind::Numeric,
            AttributeValue::Categorical { .. } => AttributeKind::Categorical,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            AttributeValue::Numeric { value, .. } => Some(*value),
            AttributeValue::Categorical { .. } => None,
        }
    }

    pub fn as_label(&self) -> Option<&str> {
        match self {
            AttributeValue::Categorical { label } => Some(label),
            AttributeValue::Numeric { .. } => None,
        }
    }

    fn validate(&self) -> Result<(), BimError> {
        match self {
            AttributeValue::Numeric { value, .. } if !value.is_finite() => Err(BimError::NonFinite(*value)),
            AttributeValue::Categorical { label } if label.is_empty() => Err(BimError::EmptyLabel),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImputeMethod {
    Kriging,
    NeuralNet,
    NeighborMajority,
}

impl fmt::Display for ImputeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImputeMethod::Kriging => "kriging",
            ImputeMethod::NeuralNet => "neural-net",
            ImputeMethod::NeighborMajority => "neighbor-majority",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Provenance {
    Metadata,
    Vision { confidence: f64 },
    Imputed { method: ImputeMethod, uncertainty: f64 },
}

impl Provenance {
    pub fn vision(confidence: f64) -> Result<Self, BimError> {
        let p = Provenance::Vision { confidence };
        p.validate().map(|_| p)
    }

    pub fn imputed(method: ImputeMethod, uncertainty: f64) -> Result<Self, BimError> {
        let p = Provenance::Imputed { method, uncertainty };
        p.validate().map(|_| p)
    }

    pub fn is_observed(&self) -> bool {
        !matches!(self, Provenance::Imputed { .. })
    }

    fn validate(&self) -> Result<(), BimError> {
        match *self {
            Provenance::Vision { confidence } if !(0.0..=1.0).contains(&confidence) => {
                Err(BimError::InvalidConfidence(confidence))
            }
            Provenance::Imputed { uncertainty, .. } if !(uncertainty >= 0.0 && uncertainty.is_finite()) => {
                Err(BimError::InvalidUncertainty(uncertainty))
            }
            _ => Ok(()),
        }
    }
}

/// A value together with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub value: AttributeValue,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geocode: Option<Geocode>,
    #[serde(default)]
    pub attributes: BTreeMap<String, Attribute>,
}

impl BuildingRecord {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            address: None,
            geocode: None,
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_geocode(mut self, geocode: Geocode) -> Self {
        self.geocode = Some(geocode);
        self
    }

    pub fn with_address(mut self, address: impl Into<String>) -> Self {
        self.address = Some(address.into());
        self
    }

    pub fn with_attribute(mut self, name: impl Into<String>, value: AttributeValue, provenance: Provenance) -> Self {
        self.attributes.insert(name.into(), Attribute { value, provenance });
        self
    }

    pub fn get(&self, name: &str) -> Option<&Attribute> {
        self.attributes.get(name)
    }
}

pub type Schema = BTreeMap<String, AttributeKind>;

/// A validated set of building records.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Inventory {
    schema: Schema,
    records: Vec<BuildingRecord>,
}

impl Inventory {
    /// Validates ids, attribute kinds and value invariants.
    pub fn new(schema: Schema, records: Vec<BuildingRecord>) -> Result<Self, BimError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(BimError::DuplicateId(r.id.clone()));
            }
            for (name, attr) in &r.attributes {
                let expected = *schema.get(name).ok_or_else(|| BimError::UnknownAttribute {
                    id: r.id.clone(),
                    attribute: name.clone(),
                })?;
                if attr.value.kind() != expected {
                    return Err(BimError::KindMismatch {
                        id: r.id.clone(),
                        attribute: name.clone(),
                        expected,
                    });
                }
                attr.value.validate()?;
                attr.provenance.validate()?;
            }
        }
        Ok(Self { schema, records })
    }

    pub fn empty(schema: Schema) -> Self {
        Self {
            schema,
            records: Vec::new(),
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn records(&self) -> &[BuildingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&BuildingRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn kind_of(&self, attribute: &str) -> Result<AttributeKind, BimError> {
        self.schema
            .get(attribute)
            .copied()
            .ok_or_else(|| BimError::NoSuchAttribute(attribute.to_string()))
    }

    pub fn into_parts(self) -> (Schema, Vec<BuildingRecord>) {
        (self.schema, self.records)
    }

    /// Total number of stored attribute values across all records.
    pub fn attribute_count(&self) -> usize {
        self.records.iter().map(|r| r.attributes.len()).sum()
    }
}

/// Which source wins when both define the same attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergePolicy {
    #[default]
    MetadataFirst,
    VisionFirst,
}

/// Merges a metadata-derived and a vision-derived inventory into one record
/// per id. Record order is the metadata order followed by vision-only ids.
pub fn merge_inventories(metadata: &Inventory, vision: &Inventory, policy: MergePolicy) -> Result<Inventory, BimError> {
    let mut schema = metadata.schema.clone();
    for (name, &kind) in &vision.schema {
        match schema.get(name) {
            Some(&existing) if existing != kind => {
                return Err(BimError::SchemaConflict {
                    attribute: name.clone(),
                    left: existing,
                    right: kind,
                })
            }
            Some(_) => {}
            None => {
                schema.insert(name.clone(), kind);
            }
        }
    }

    let (primary, secondary) = match policy {
        MergePolicy::MetadataFirst => (metadata, vision),
        MergePolicy::VisionFirst => (vision, metadata),
    };
    let secondary_by_id: HashMap<&str, &BuildingRecord> =
        secondary.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let primary_by_id: HashMap<&str, &BuildingRecord> = primary.records.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut conflicts = Vec::new();
    let mut merged = Vec::with_capacity(metadata.len().max(vision.len()));
    let metadata_ids: HashSet<&str> = metadata.records.iter().map(|r| r.id.as_str()).collect();
    let ordered = metadata
        .records
        .iter()
        .chain(vision.records.iter().filter(|r| !metadata_ids.contains(r.id.as_str())));
    for rec in ordered {
        let (p, s) = (primary_by_id.get(rec.id.as_str()), secondary_by_id.get(rec.id.as_str()));
        let out = match (p, s) {
            (Some(p), Some(s)) => {
                if let (Some(a), Some(b)) = (p.geocode, s.geocode) {
                    if haversine_distance(a, b) > GEOCODE_CONFLICT_M {
                        conflicts.push(rec.id.clone());
                    }
                }
                let mut out = (*p).clone();
                out.address = p.address.clone().or_else(|| s.address.clone());
                out.geocode = p.geocode.or(s.geocode);
                for (name, attr) in &s.attributes {
                    out.attributes.entry(name.clone()).or_insert_with(|| attr.clone());
                }
                out
            }
            (Some(only), None) | (None, Some(only)) => (*only).clone(),
            (None, None) => unreachable!("id drawn from one of the inputs"),
        };
        merged.push(out);
    }
    if !conflicts.is_empty() {
        return Err(BimError::GeocodeConflict(conflicts));
    }
    Inventory::new(schema, merged)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissingReport {
    pub present: Vec<String>,
    pub missing: Vec<String>,
}

impl MissingReport {
    pub fn missing_rate(&self) -> f64 {
        let n = self.present.len() + self.missing.len();
        if n == 0 {
            0.0
        } else {
            self.missing.len() as f64 / n as f64
        }
    }
}

/// Partitions record ids by whether `attribute` is populated.
pub fn missing_report(inv: &Inventory, attribute: &str) -> Result<MissingReport, BimError> {
    inv.kind_of(attribute)?;
    let (present, missing): (Vec<_>, Vec<_>) = inv.records.iter().partition(|r| r.attributes.contains_key(attribute));
    Ok(MissingReport {
        present: present.into_iter().map(|r| r.id.clone()).collect(),
        missing: missing.into_iter().map(|r| r.id.clone()).collect(),
    })
}

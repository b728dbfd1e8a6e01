//! File ingestion and GeoJSON export.
//!
//! Tax-record metadata and vision-model predictions arrive as CSV files whose
//! layout is described by a [`CsvSchemaSpec`]. Malformed rows are collected
//! into a rejects report and parsing carries on.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::bim::{
    Attribute, AttributeKind, AttributeValue, BimError, BuildingRecord, Geocode, Inventory, Provenance, Schema,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` declared in the schema is missing from the header")]
    MissingColumn(String),
    #[error("record `{0}` has no geocode")]
    MissingGeocode(String),
    #[error("invalid GeoJSON: {0}")]
    GeoJson(String),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Bim(#[from] BimError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeColumn {
    pub name: String,
    pub kind: AttributeKind,
    /// CSV header name when it differs from the attribute name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl AttributeColumn {
    pub fn new(name: impl Into<String>, kind: AttributeKind) -> Self {
        Self {
            name: name.into(),
            kind,
            column: None,
            unit: None,
        }
    }

    fn header(&self) -> &str {
        self.column.as_deref().unwrap_or(&self.name)
    }
}

/// Column layout of an inventory CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchemaSpec {
    pub id_column: String,
    #[serde(default)]
    pub address_column: Option<String>,
    #[serde(default)]
    pub lat_column: Option<String>,
    #[serde(default)]
    pub lon_column: Option<String>,
    /// Vision files only: per-row confidence in [0, 1]. Defaults to 1.0 when
    /// the column is absent from the spec or the header.
    #[serde(default)]
    pub confidence_column: Option<String>,
    pub attributes: Vec<AttributeColumn>,
}

impl CsvSchemaSpec {
    pub fn new(id_column: impl Into<String>, attributes: Vec<AttributeColumn>) -> Self {
        Self {
            id_column: id_column.into(),
            address_column: None,
            lat_column: None,
            lon_column: None,
            confidence_column: None,
            attributes,
        }
    }

    pub fn schema(&self) -> Schema {
        self.attributes.iter().map(|a| (a.name.clone(), a.kind)).collect()
    }
}

const ID_NAMES: [&str; 1] = ["id"];
const ADDRESS_NAMES: [&str; 1] = ["address"];
const LAT_NAMES: [&str; 2] = ["lat", "latitude"];
const LON_NAMES: [&str; 3] = ["lon", "lng", "longitude"];
const CONFIDENCE_NAMES: [&str; 1] = ["confidence"];

/// Derives a column layout from a CSV header and its cells. Role columns are
/// recognized by name (case-insensitive): `id`, `address`, `lat`/`latitude`,
/// `lon`/`lng`/`longitude`, `confidence`. Every other column is an attribute,
/// numeric when all its non-empty cells parse as finite numbers.
pub fn infer_spec(reader: impl Read) -> Result<CsvSchemaSpec, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let role = |names: &[&str]| headers.iter().find(|h| names.contains(&h.to_ascii_lowercase().as_str())).cloned();
    let id = role(&ID_NAMES).ok_or_else(|| IngestError::MissingColumn("id".into()))?;
    let reserved: Vec<Option<String>> = vec![
        Some(id.clone()),
        role(&ADDRESS_NAMES),
        role(&LAT_NAMES),
        role(&LON_NAMES),
        role(&CONFIDENCE_NAMES),
    ];
    let attr_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| !reserved.iter().flatten().any(|r| *r == headers[i]))
        .collect();
    let mut numeric = vec![true; attr_cols.len()];
    let mut seen = vec![false; attr_cols.len()];
    for row in rdr.records() {
        let row = row?;
        for (k, &c) in attr_cols.iter().enumerate() {
            let v = row.get(c).map(str::trim).unwrap_or("");
            if !v.is_empty() {
                seen[k] = true;
                numeric[k] &= v.parse::<f64>().is_ok_and(f64::is_finite);
            }
        }
    }
    let mut spec = CsvSchemaSpec::new(
        id,
        attr_cols
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let kind = if numeric[k] && seen[k] {
                    AttributeKind::Numeric
                } else {
                    AttributeKind::Categorical
                };
                AttributeColumn::new(headers[c].clone(), kind)
            })
            .collect(),
    );
    spec.address_column = reserved[1].clone();
    spec.lat_column = reserved[2].clone();
    spec.lon_column = reserved[3].clone();
    spec.confidence_column = reserved[4].clone();
    Ok(spec)
}

pub fn infer_spec_from_path(path: impl AsRef<Path>) -> Result<CsvSchemaSpec, IngestError> {
    let path = path.as_ref();
    infer_spec(File::open(path).map_err(io_err(path))?)
}

/// A row that could not be ingested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub inventory: Inventory,
    pub rejects: Vec<Reject>,
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Metadata,
    Vision,
}

pub fn parse_metadata_csv(path: impl AsRef<Path>, spec: &CsvSchemaSpec) -> Result<Parsed, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    parse_csv(BufReader::new(file), spec, Source::Metadata)
}

pub fn parse_vision_csv(path: impl AsRef<Path>, spec: &CsvSchemaSpec) -> Result<Parsed, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    parse_csv(BufReader::new(file), spec, Source::Vision)
}

pub fn parse_metadata_reader(reader: impl Read, spec: &CsvSchemaSpec) -> Result<Parsed, IngestError> {
    parse_csv(reader, spec, Source::Metadata)
}

pub fn parse_vision_reader(reader: impl Read, spec: &CsvSchemaSpec) -> Result<Parsed, IngestError> {
    parse_csv(reader, spec, Source::Vision)
}

struct Columns {
    id: usize,
    address: Option<usize>,
    lat: Option<usize>,
    lon: Option<usize>,
    confidence: Option<usize>,
    attributes: Vec<usize>,
}

fn locate(headers: &csv::StringRecord, name: &str) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
}

fn parse_csv(reader: impl Read, spec: &CsvSchemaSpec, source: Source) -> Result<Parsed, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let optional = |name: &Option<String>| name.as_deref().map(|n| locate(&headers, n)).transpose();
    let cols = Columns {
        id: locate(&headers, &spec.id_column)?,
        address: optional(&spec.address_column)?,
        lat: optional(&spec.lat_column)?,
        lon: optional(&spec.lon_column)?,
        // a vision file without the confidence column falls back to 1.0
        confidence: match (source, &spec.confidence_column) {
            (Source::Vision, Some(c)) => headers.iter().position(|h| h.trim() == c),
            _ => None,
        },
        attributes: spec
            .attributes
            .iter()
            .map(|a| locate(&headers, a.header()))
            .collect::<Result<_, _>>()?,
    };

    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                rejects.push(Reject {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        match parse_row(&row, &cols, spec, source) {
            Ok(rec) if !seen.insert(rec.id.clone()) => rejects.push(Reject {
                line,
                reason: format!("duplicate id `{}`", rec.id),
            }),
            Ok(rec) => records.push(rec),
            Err(reason) => rejects.push(Reject { line, reason }),
        }
    }
    Ok(Parsed {
        inventory: Inventory::new(spec.schema(), records)?,
        rejects,
    })
}

fn cell<'a>(row: &'a csv::StringRecord, idx: Option<usize>) -> Option<&'a str> {
    idx.and_then(|i| row.get(i)).map(str::trim).filter(|s| !s.is_empty())
}

fn parse_row(
    row: &csv::StringRecord,
    cols: &Columns,
    spec: &CsvSchemaSpec,
    source: Source,
) -> Result<BuildingRecord, String> {
    let id = cell(row, Some(cols.id)).ok_or("empty id")?;
    let mut rec = BuildingRecord::new(id);
    rec.address = cell(row, cols.address).map(str::to_string);

    match (cell(row, cols.lat), cell(row, cols.lon)) {
        (Some(lat), Some(lon)) => {
            let lat: f64 = lat.parse().map_err(|_| format!("non-numeric latitude `{lat}`"))?;
            let lon: f64 = lon.parse().map_err(|_| format!("non-numeric longitude `{lon}`"))?;
            rec.geocode = Some(Geocode::new(lat, lon).map_err(|e| e.to_string())?);
        }
        (None, None) => {}
        _ => return Err("latitude and longitude must both be present or both empty".into()),
    }

    let provenance = match source {
        Source::Metadata => Provenance::Metadata,
        Source::Vision => {
            let confidence = match cell(row, cols.confidence) {
                Some(c) => c.parse::<f64>().map_err(|_| format!("non-numeric confidence `{c}`"))?,
                None => 1.0,
            };
            Provenance::vision(confidence).map_err(|e| e.to_string())?
        }
    };

    for (col, &idx) in spec.attributes.iter().zip(&cols.attributes) {
        let Some(raw) = cell(row, Some(idx)) else { continue };
        let value = match col.kind {
            AttributeKind::Numeric => {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| format!("column `{}`: non-numeric value `{raw}`", col.header()))?;
                AttributeValue::numeric_with_unit(v, col.unit.clone())
                    .map_err(|e| format!("column `{}`: {e}", col.header()))?
            }
            AttributeKind::Categorical => AttributeValue::categorical(raw).map_err(|e| e.to_string())?,
        };
        rec.attributes.insert(col.name.clone(), Attribute { value, provenance });
    }
    Ok(rec)
}

/// Writes a rejects report as JSON lines, one `{line, reason}` object per row.
pub fn write_rejects(path: impl AsRef<Path>, rejects: &[Reject]) -> Result<(), IngestError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in rejects {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// What to do with records that have no geocode during export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingGeocode {
    #[default]
    Skip,
    Error,
    /// Keep the record as a feature with `"geometry": null`.
    NullGeometry,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ExportSummary {
    pub written: usize,
    pub skipped: Vec<String>,
}

fn attribute_json(attr: &Attribute) -> Value {
    let mut obj = Map::new();
    match &attr.value {
        AttributeValue::Numeric { value, unit } => {
            obj.insert("value".into(), json!(value));
            if let Some(u) = unit {
                obj.insert("unit".into(), json!(u));
            }
        }
        AttributeValue::Categorical { label } => {
            obj.insert("value".into(), json!(label));
        }
    }
    match attr.provenance {
        Provenance::Metadata => {
            obj.insert("source".into(), json!("metadata"));
        }
        Provenance::Vision { confidence } => {
            obj.insert("source".into(), json!("vision"));
            obj.insert("confidence".into(), json!(confidence));
        }
        Provenance::Imputed { method, uncertainty } => {
            obj.insert("source".into(), json!("imputed"));
            obj.insert("method".into(), json!(method.to_string()));
            obj.insert("uncertainty".into(), json!(uncertainty));
        }
    }
    Value::Object(obj)
}

/// Builds the GeoJSON FeatureCollection for an inventory. The schema travels
/// as a foreign member so the file round-trips through [`parse_geojson`].
pub fn inventory_to_geojson(inv: &Inventory, policy: MissingGeocode) -> Result<(Value, ExportSummary), IngestError> {
    let mut summary = ExportSummary::default();
    let mut features = Vec::with_capacity(inv.len());
    for rec in inv.records() {
        let geometry = match (rec.geocode, policy) {
            (Some(g), _) => json!({"type": "Point", "coordinates": [g.lon(), g.lat()]}),
            (None, MissingGeocode::NullGeometry) => Value::Null,
            (None, MissingGeocode::Error) => return Err(IngestError::MissingGeocode(rec.id.clone())),
            (None, MissingGeocode::Skip) => {
                log::warn!("skipping `{}` in GeoJSON export: no geocode", rec.id);
                summary.skipped.push(rec.id.clone());
                continue;
            }
        };
        let attributes: Map<String, Value> =
            rec.attributes.iter().map(|(k, a)| (k.clone(), attribute_json(a))).collect();
        let mut props = Map::new();
        props.insert("id".into(), json!(rec.id));
        if let Some(addr) = &rec.address {
            props.insert("address".into(), json!(addr));
        }
        props.insert("attributes".into(), Value::Object(attributes));
        features.push(json!({
            "type": "Feature",
            "id": rec.id,
            "geometry": geometry,
            "properties": props,
        }));
        summary.written += 1;
    }
    let schema: Map<String, Value> = inv.schema().iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    Ok((
        json!({"type": "FeatureCollection", "schema": schema, "features": features}),
        summary,
    ))
}

pub fn export_geojson(
    inv: &Inventory,
    path: impl AsRef<Path>,
    policy: MissingGeocode,
) -> Result<ExportSummary, IngestError> {
    let path = path.as_ref();
    let (doc, summary) = inventory_to_geojson(inv, policy)?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    Ok(summary)
}

fn bad(msg: impl Into<String>) -> IngestError {
    IngestError::GeoJson(msg.into())
}

fn attribute_from_json(name: &str, kind: AttributeKind, v: &Value) -> Result<Attribute, IngestError> {
    let obj = v.as_object().ok_or_else(|| bad(format!("attribute `{name}` is not an object")))?;
    let raw = obj.get("value").ok_or_else(|| bad(format!("attribute `{name}` has no value")))?;
    let value = match kind {
        AttributeKind::Numeric => {
            let x = raw.as_f64().ok_or_else(|| bad(format!("attribute `{name}` is not numeric")))?;
            let unit = obj.get("unit").and_then(Value::as_str).map(str::to_string);
            AttributeValue::numeric_with_unit(x, unit)?
        }
        AttributeKind::Categorical => {
            AttributeValue::categorical(raw.as_str().ok_or_else(|| bad(format!("attribute `{name}` is not text")))?)?
        }
    };
    let num = |key: &str| {
        obj.get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| bad(format!("attribute `{name}` lacks `{key}`")))
    };
    let provenance = match obj.get("source").and_then(Value::as_str) {
        Some("metadata") => Provenance::Metadata,
        Some("vision") => Provenance::vision(num("confidence")?)?,
        Some("imputed") => {
            let method = serde_json::from_value(obj.get("method").cloned().unwrap_or(Value::Null))
                .map_err(|_| bad(format!("attribute `{name}` has an unknown imputation method")))?;
            Provenance::imputed(method, num("uncertainty")?)?
        }
        other => return Err(bad(format!("attribute `{name}` has unknown source {other:?}"))),
    };
    Ok(Attribute { value, provenance })
}

/// Parses a FeatureCollection written by [`export_geojson`].
pub fn geojson_to_inventory(doc: &Value) -> Result<Inventory, IngestError> {
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(bad("not a FeatureCollection"));
    }
    let schema: Schema = match doc.get("schema") {
        Some(s) => serde_json::from_value(s.clone())?,
        None => BTreeMap::new(),
    };
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing features array"))?;
    let mut records = Vec::with_capacity(features.len());
    for f in features {
        let props = f
            .get("properties")
            .and_then(Value::as_object)
            .ok_or_else(|| bad("feature without properties"))?;
        let id = props
            .get("id")
            .and_then(Value::as_str)
            .or_else(|| f.get("id").and_then(Value::as_str))
            .ok_or_else(|| bad("feature without id"))?;
        let mut rec = BuildingRecord::new(id);
        rec.address = props.get("address").and_then(Value::as_str).map(str::to_string);
        if let Some(coords) = f.pointer("/geometry/coordinates").and_then(Value::as_array) {
            let (lon, lat) = match coords.as_slice() {
                [lon, lat, ..] => (lon.as_f64(), lat.as_f64()),
                _ => (None, None),
            };
            let (Some(lon), Some(lat)) = (lon, lat) else {
                return Err(bad(format!("feature `{id}` has malformed coordinates")));
            };
            rec.geocode = Some(Geocode::new(lat, lon)?);
        }
        if let Some(attrs) = props.get("attributes").and_then(Value::as_object) {
            for (name, v) in attrs {
                let kind = *schema
                    .get(name)
                    .ok_or_else(|| bad(format!("attribute `{name}` missing from schema")))?;
                rec.attributes.insert(name.clone(), attribute_from_json(name, kind, v)?);
            }
        }
        records.push(rec);
    }
    Ok(Inventory::new(schema, records)?)
}

pub fn parse_geojson(path: impl AsRef<Path>) -> Result<Inventory, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let doc: Value = serde_json::from_reader(BufReader::new(file))?;
    geojson_to_inventory(&doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inferred_layout() {
        let spec = infer_spec("ID,Address,Latitude,lng,stories,material,note\nA,1 Main,37,-122,2,wood,\nB,2 Main,,,x3,steel,\n".as_bytes()).unwrap();
        assert_eq!(spec.id_column, "ID");
        assert_eq!(spec.lat_column.as_deref(), Some("Latitude"));
        assert_eq!(spec.lon_column.as_deref(), Some("lng"));
        assert_eq!(spec.confidence_column, None);
        let kinds: Vec<_> = spec.attributes.iter().map(|a| (a.name.as_str(), a.kind)).collect();
        assert_eq!(
            kinds,
            [("stories", AttributeKind::Categorical), ("material", AttributeKind::Categorical), ("note", AttributeKind::Categorical)]
        );
        let spec = infer_spec("id,stories\nA,2\nB,\n".as_bytes()).unwrap();
        assert_eq!(spec.attributes[0].kind, AttributeKind::Numeric);
    }

    #[test]
    fn null_geometry_round_trip() {
        let schema: Schema = [("s".to_string(), AttributeKind::Numeric)].into_iter().collect();
        let inv = Inventory::new(
            schema,
            vec![BuildingRecord::new("a").with_address("1 Main").with_attribute("s", AttributeValue::numeric(2.0).unwrap(), Provenance::Metadata)],
        )
        .unwrap();
        let (doc, summary) = inventory_to_geojson(&inv, MissingGeocode::NullGeometry).unwrap();
        assert_eq!(summary.written, 1);
        assert!(doc["features"][0]["geometry"].is_null());
        assert_eq!(geojson_to_inventory(&doc).unwrap(), inv);
    }

    fn spec() -> CsvSchemaSpec {
        CsvSchemaSpec::new(
            "id",
            vec![
                AttributeColumn::new("stories", AttributeKind::Numeric),
                AttributeColumn::new("material", AttributeKind::Categorical),
            ],
        )
    }

    #[test]
    fn header_only_gives_empty_inventory() {
        let parsed = parse_metadata_reader("id,stories,material\n".as_bytes(), &spec()).unwrap();
        assert!(parsed.inventory.is_empty());
        assert!(parsed.rejects.is_empty());
    }

    #[test]
    fn direct_row_mapping() {
        let parsed = parse_metadata_reader("id,stories,material\nB1,2,wood\n".as_bytes(), &spec()).unwrap();
        let b1 = parsed.inventory.get("B1").unwrap();
        assert_eq!(b1.get("stories").unwrap().value, AttributeValue::numeric(2.0).unwrap());
        assert_eq!(b1.get("material").unwrap().value, AttributeValue::categorical("wood").unwrap());
        assert_eq!(b1.get("stories").unwrap().provenance, Provenance::Metadata);
    }

    #[test]
    fn empty_cells_are_absent_and_bad_numbers_rejected() {
        let csv = "id,stories,material\nB1,,wood\nB2,two,wood\nB3,3,\n";
        let parsed = parse_metadata_reader(csv.as_bytes(), &spec()).unwrap();
        assert_eq!(parsed.inventory.len(), 2);
        assert!(parsed.inventory.get("B1").unwrap().get("stories").is_none());
        assert_eq!(parsed.rejects.len(), 1);
        assert_eq!(parsed.rejects[0].line, 3);
        assert!(parsed.rejects[0].reason.contains("stories"));
    }

    #[test]
    fn missing_column_is_named() {
        match parse_metadata_reader("id,stories\n".as_bytes(), &spec()) {
            Err(IngestError::MissingColumn(c)) => assert_eq!(c, "material"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn quoted_fields() {
        let mut s = spec();
        s.address_column = Some("address".into());
        let csv = "id,address,stories,material\nB1,\"1 Main St, Oakland\",2,\"reinforced, concrete\"\n";
        let parsed = parse_metadata_reader(csv.as_bytes(), &s).unwrap();
        let b1 = parsed.inventory.get("B1").unwrap();
        assert_eq!(b1.address.as_deref(), Some("1 Main St, Oakland"));
        assert_eq!(b1.get("material").unwrap().value.as_label(), Some("reinforced, concrete"));
    }

    fn vision_spec(with_conf: bool) -> CsvSchemaSpec {
        let mut s = CsvSchemaSpec::new("id", vec![AttributeColumn::new("ss_label", AttributeKind::Categorical)]);
        if with_conf {
            s.confidence_column = Some("confidence".into());
        }
        s
    }

    #[test]
    fn vision_confidence() {
        let csv = "id,ss_label,confidence\nB1,soft-story,0.91\n";
        let parsed = parse_vision_reader(csv.as_bytes(), &vision_spec(true)).unwrap();
        let attr = parsed.inventory.get("B1").unwrap().get("ss_label").unwrap();
        assert_eq!(attr.value.as_label(), Some("soft-story"));
        assert_eq!(attr.provenance, Provenance::Vision { confidence: 0.91 });

        let parsed = parse_vision_reader("id,ss_label\nB1,soft-story\n".as_bytes(), &vision_spec(true)).unwrap();
        let attr = parsed.inventory.get("B1").unwrap().get("ss_label").unwrap();
        assert_eq!(attr.provenance, Provenance::Vision { confidence: 1.0 });
    }

    #[test]
    fn vision_rejects_out_of_range_confidence() {
        let rows = [("B1", "0.5"), ("B2", "1.5"), ("B3", "-0.1"), ("B4", "1.0"), ("B5", "abc"), ("B6", "0")];
        let mut csv = String::from("id,ss_label,confidence\n");
        for (id, c) in rows {
            csv.push_str(&format!("{id},ss,{c}\n"));
        }
        let expected = rows
            .iter()
            .filter(|(_, c)| !matches!(c.parse::<f64>(), Ok(v) if (0.0..=1.0).contains(&v)))
            .count();
        let parsed = parse_vision_reader(csv.as_bytes(), &vision_spec(true)).unwrap();
        assert_eq!(parsed.rejects.len(), expected);
        assert_eq!(parsed.inventory.len(), rows.len() - expected);
    }

    #[test]
    fn thousand_rows_against_line_counter() {
        let mut csv = String::from("id,stories,material\n");
        for i in 0..1000 {
            if i % 37 == 0 {
                csv.push_str(&format!("B{i},x{i},wood\n"));
            } else {
                csv.push_str(&format!("B{i},{},steel\n", i % 5 + 1));
            }
        }
        let parsed = parse_metadata_reader(csv.as_bytes(), &spec()).unwrap();
        let lines = csv.lines().count();
        assert_eq!(parsed.inventory.len(), lines - 1 - parsed.rejects.len());
        assert_eq!(parsed.rejects.len(), (0..1000).filter(|i| i % 37 == 0).count());
    }

    #[test]
    fn export_empty_and_single() {
        let inv = Inventory::empty(spec().schema());
        let (doc, _) = inventory_to_geojson(&inv, MissingGeocode::Error).unwrap();
        assert_eq!(doc["features"].as_array().unwrap().len(), 0);

        let g = Geocode::new(37.8, -122.27).unwrap();
        let inv = Inventory::new(spec().schema(), vec![BuildingRecord::new("A").with_geocode(g)]).unwrap();
        let (doc, _) = inventory_to_geojson(&inv, MissingGeocode::Error).unwrap();
        assert_eq!(doc["features"][0]["geometry"]["coordinates"], json!([-122.27, 37.8]));
    }

    #[test]
    fn missing_geocode_policy() {
        let inv = Inventory::new(spec().schema(), vec![BuildingRecord::new("A")]).unwrap();
        assert!(matches!(
            inventory_to_geojson(&inv, MissingGeocode::Error),
            Err(IngestError::MissingGeocode(_))
        ));
        let (doc, summary) = inventory_to_geojson(&inv, MissingGeocode::Skip).unwrap();
        assert_eq!(summary.skipped, vec!["A".to_string()]);
        assert!(doc["features"].as_array().unwrap().is_empty());
    }

    #[test]
    fn imputed_properties_exported() {
        let g = Geocode::new(37.8, -122.27).unwrap();
        let rec = BuildingRecord::new("A").with_geocode(g).with_attribute(
            "stories",
            AttributeValue::numeric(2.5).unwrap(),
            Provenance::imputed(crate::bim::ImputeMethod::Kriging, 0.3).unwrap(),
        );
        let inv = Inventory::new(spec().schema(), vec![rec]).unwrap();
        let (doc, _) = inventory_to_geojson(&inv, MissingGeocode::Error).unwrap();
        let attr = &doc["features"][0]["properties"]["attributes"]["stories"];
        assert_eq!(attr["source"], "imputed");
        assert_eq!(attr["method"], "kriging");
        assert_eq!(attr["uncertainty"], 0.3);
    }
}

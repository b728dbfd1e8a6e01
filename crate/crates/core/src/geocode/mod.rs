//! Address geocoding through pluggable providers with a persistent cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bim::{BimError, Geocode, Inventory};

pub mod http;

pub use http::{HttpProvider, HttpResponse, RetryPolicy, Transport};
#[cfg(feature = "http")]
pub use http::UreqTransport;

/// Environment variable holding the HTTP provider's API key.
pub const API_KEY_ENV: &str = "GEOCODER_API_KEY";

#[derive(Debug, Error)]
pub enum GeocodeError {
    #[error("address must be non-empty")]
    EmptyAddress,
    #[error("no match for `{0}`")]
    NotFound(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("geocode table line {line}: {reason}")]
    Table { line: u64, reason: String },
    #[error("cache error on {path}: {reason}")]
    Cache { path: String, reason: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Bim(#[from] BimError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeocodeRequest {
    address: String,
    region_hint: Option<String>,
}

impl GeocodeRequest {
    pub fn new(address: impl Into<String>) -> Result<Self, GeocodeError> {
        let address = address.into();
        if address.trim().is_empty() {
            return Err(GeocodeError::EmptyAddress);
        }
        Ok(Self {
            address,
            region_hint: None,
        })
    }

    pub fn with_region(mut self, hint: impl Into<String>) -> Self {
        self.region_hint = Some(hint.into());
        self
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn region_hint(&self) -> Option<&str> {
        self.region_hint.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchQuality {
    Exact,
    Interpolated,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeocodeResult {
    pub geocode: Geocode,
    pub match_quality: MatchQuality,
}

/// Lowercases and collapses whitespace runs to one space.
pub fn normalize_address(address: &str) -> String {
    address.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

pub trait GeocodeProvider: Send + Sync {
    fn lookup(&self, req: &GeocodeRequest) -> Result<GeocodeResult, GeocodeError>;
}

impl<P: GeocodeProvider + ?Sized> GeocodeProvider for &P {
    fn lookup(&self, req: &GeocodeRequest) -> Result<GeocodeResult, GeocodeError> {
        (**self).lookup(req)
    }
}

impl<P: GeocodeProvider + ?Sized> GeocodeProvider for Box<P> {
    fn lookup(&self, req: &GeocodeRequest) -> Result<GeocodeResult, GeocodeError> {
        (**self).lookup(req)
    }
}

/// Lookup table loaded from CSV `address,lat,lon[,quality]`.
#[derive(Debug, Clone, Default)]
pub struct FileProvider {
    table: HashMap<String, GeocodeResult>,
}

impl FileProvider {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, GeocodeError> {
        Self::from_reader(File::open(path)?)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self, GeocodeError> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        let mut table = HashMap::new();
        for row in rdr.records() {
            let row = row.map_err(|e| GeocodeError::Table {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                reason: e.to_string(),
            })?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let err = |reason: String| GeocodeError::Table { line, reason };
            let field = |i: usize| row.get(i).map(str::trim).unwrap_or("");
            let lat: f64 = field(1).parse().map_err(|_| err(format!("bad latitude `{}`", field(1))))?;
            let lon: f64 = field(2).parse().map_err(|_| err(format!("bad longitude `{}`", field(2))))?;
            let match_quality = match field(3) {
                "" => MatchQuality::Exact,
                q => serde_json::from_value(serde_json::Value::String(q.to_lowercase()))
                    .map_err(|_| err(format!("unknown quality `{q}`")))?,
            };
            let geocode = Geocode::new(lat, lon).map_err(|e| err(e.to_string()))?;
            table.insert(normalize_address(field(0)), GeocodeResult { geocode, match_quality });
        }
        Ok(Self { table })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, GeocodeResult)>) -> Self {
        Self {
            table: entries.into_iter().map(|(a, r)| (normalize_address(&a), r)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl GeocodeProvider for FileProvider {
    fn lookup(&self, req: &GeocodeRequest) -> Result<GeocodeResult, GeocodeError> {
        self.table
            .get(&normalize_address(&req.address))
            .copied()
            .ok_or_else(|| GeocodeError::NotFound(req.address.clone()))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    address: String,
    lat: f64,
    lon: f64,
    quality: MatchQuality,
}

/// A provider fronted by a cache keyed on the normalized address. Reads run
/// concurrently; cache writes and appends to the cache file are serialized.
pub struct Geocoder<P> {
    provider: P,
    cache: RwLock<HashMap<String, GeocodeResult>>,
    sink: Option<(PathBuf, Mutex<BufWriter<File>>)>,
}

impl<P: GeocodeProvider> Geocoder<P> {
    pub fn new(provider: P) -> Self {
        Self {
            provider,
            cache: RwLock::new(HashMap::new()),
            sink: None,
        }
    }

    /// Loads any existing entries from `path` and appends new ones to it.
    pub fn with_cache_file(provider: P, path: impl AsRef<Path>) -> Result<Self, GeocodeError> {
        let path = path.as_ref().to_path_buf();
        let cache_err = |reason: String| GeocodeError::Cache {
            path: path.display().to_string(),
            reason,
        };
        let mut cache = HashMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine =
                    serde_json::from_str(&line).map_err(|e| cache_err(format!("line {}: {e}", i + 1)))?;
                let geocode = Geocode::new(entry.lat, entry.lon)?;
                cache.insert(
                    normalize_address(&entry.address),
                    GeocodeResult {
                        geocode,
                        match_quality: entry.quality,
                    },
                );
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            provider,
            cache: RwLock::new(cache),
            sink: Some((path, Mutex::new(BufWriter::new(file)))),
        })
    }

    pub fn provider(&self) -> &P {
        &self.provider
    }

    pub fn cached_len(&self) -> usize {
        self.cache.read().expect("cache lock poisoned").len()
    }

    pub fn resolve(&self, req: &GeocodeRequest) -> Result<GeocodeResult, GeocodeError> {
        let key = normalize_address(&req.address);
        if let Some(hit) = self.cache.read().expect("cache lock poisoned").get(&key) {
            return Ok(*hit);
        }
        let result = self.provider.lookup(req)?;
        let mut cache = self.cache.write().expect("cache lock poisoned");
        if cache.insert(key.clone(), result).is_none() {
            if let Some((path, sink)) = &self.sink {
                let line = serde_json::to_string(&CacheLine {
                    address: key,
                    lat: result.geocode.lat(),
                    lon: result.geocode.lon(),
                    quality: result.match_quality,
                })
                .expect("cache line serializes");
                let mut w = sink.lock().expect("cache sink poisoned");
                writeln!(w, "{line}")
                    .and_then(|_| w.flush())
                    .map_err(|e| GeocodeError::Cache {
                        path: path.display().to_string(),
                        reason: e.to_string(),
                    })?;
            }
        }
        Ok(result)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeocodedInventory {
    pub inventory: Inventory,
    pub failures: Vec<String>,
}

/// Attaches geocodes to every record that has an address but no geocode.
/// Records that cannot be resolved, or have no address, are listed as failures.
pub fn geocode_inventory<P: GeocodeProvider>(geocoder: &Geocoder<P>, inv: &Inventory) -> GeocodedInventory {
    let mut failures = Vec::new();
    let records = inv
        .records()
        .iter()
        .map(|rec| {
            if rec.geocode.is_some() {
                return rec.clone();
            }
            let resolved = rec
                .address
                .as_deref()
                .ok_or(GeocodeError::EmptyAddress)
                .and_then(GeocodeRequest::new)
                .and_then(|req| geocoder.resolve(&req));
            let mut out = rec.clone();
            match resolved {
                Ok(r) => out.geocode = Some(r.geocode),
                Err(e) => {
                    log::debug!("geocoding `{}` failed: {e}", rec.id);
                    failures.push(rec.id.clone());
                }
            }
            out
        })
        .collect();
    GeocodedInventory {
        inventory: Inventory::new(inv.schema().clone(), records).expect("attributes are unchanged"),
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bim::{AttributeKind, AttributeValue, BuildingRecord, Provenance};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting<P> {
        inner: P,
        calls: AtomicUsize,
    }

    impl<P: GeocodeProvider> GeocodeProvider for Counting<P> {
        fn lookup(&self, req: &GeocodeRequest) -> Result<GeocodeResult, GeocodeError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.lookup(req)
        }
    }

    fn table() -> FileProvider {
        FileProvider::from_reader("address,lat,lon\n1 main st,37.0,-122.0\n2 Oak Ave,37.5,-122.1,interpolated\n".as_bytes())
            .unwrap()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_address("  1 Main \t St  "), "1 main st");
        let p = table();
        let r = p.lookup(&GeocodeRequest::new("1 Main  St").unwrap()).unwrap();
        assert_eq!((r.geocode.lat(), r.geocode.lon()), (37.0, -122.0));
        assert_eq!(r.match_quality, MatchQuality::Exact);
        let r = p.lookup(&GeocodeRequest::new("2 oak ave").unwrap()).unwrap();
        assert_eq!(r.match_quality, MatchQuality::Interpolated);
    }

    #[test]
    fn unknown_address_not_found() {
        assert!(matches!(
            table().lookup(&GeocodeRequest::new("9 Nowhere").unwrap()),
            Err(GeocodeError::NotFound(_))
        ));
        assert!(matches!(GeocodeRequest::new("  "), Err(GeocodeError::EmptyAddress)));
    }

    #[test]
    fn warm_cache_skips_provider() {
        let g = Geocoder::new(Counting {
            inner: table(),
            calls: AtomicUsize::new(0),
        });
        let req = GeocodeRequest::new("1 Main St").unwrap();
        let first = g.resolve(&req).unwrap();
        assert_eq!(g.provider().calls.load(Ordering::SeqCst), 1);
        let second = g.resolve(&GeocodeRequest::new("1  MAIN st").unwrap()).unwrap();
        assert_eq!(g.provider().calls.load(Ordering::SeqCst), 1);
        assert_eq!(first, second);
    }

    #[test]
    fn cache_file_persists_across_instances() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let g = Geocoder::with_cache_file(table(), &path).unwrap();
            g.resolve(&GeocodeRequest::new("1 Main St").unwrap()).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"address\":\"1 main st\""));

        let g = Geocoder::with_cache_file(
            Counting {
                inner: FileProvider::default(),
                calls: AtomicUsize::new(0),
            },
            &path,
        )
        .unwrap();
        let r = g.resolve(&GeocodeRequest::new("1 main st").unwrap()).unwrap();
        assert_eq!(r.geocode.lat(), 37.0);
        assert_eq!(g.provider().calls.load(Ordering::SeqCst), 0);
    }

    fn inventory(n: usize) -> Inventory {
        let schema = [("stories".to_string(), AttributeKind::Numeric)].into_iter().collect();
        let recs = (0..n)
            .map(|i| {
                BuildingRecord::new(format!("b{i}"))
                    .with_address(format!("{i} Elm St"))
                    .with_attribute("stories", AttributeValue::numeric(i as f64).unwrap(), Provenance::Metadata)
            })
            .collect();
        Inventory::new(schema, recs).unwrap()
    }

    #[test]
    fn inventory_geocoding_failures() {
        let inv = inventory(10);
        let provider = FileProvider::from_entries((0..10).filter(|i| i % 3 != 1).map(|i| {
            (
                format!("{i} elm st"),
                GeocodeResult {
                    geocode: Geocode::new(37.0 + i as f64 * 1e-3, -122.0).unwrap(),
                    match_quality: MatchQuality::Exact,
                },
            )
        }));
        let expected_failures = (0..10).filter(|i| i % 3 == 1).count();
        let out = geocode_inventory(&Geocoder::new(provider), &inv);
        assert_eq!(out.failures.len(), expected_failures);
        assert_eq!(expected_failures, 3);
        for (a, b) in inv.records().iter().zip(out.inventory.records()) {
            assert_eq!(a.attributes, b.attributes);
        }
    }

    #[test]
    fn nothing_resolvable() {
        let inv = inventory(4);
        let out = geocode_inventory(&Geocoder::new(FileProvider::default()), &inv);
        assert_eq!(out.inventory, inv);
        assert_eq!(out.failures, vec!["b0", "b1", "b2", "b3"]);
    }

    #[test]
    fn all_resolvable() {
        let inv = inventory(3);
        let provider = FileProvider::from_entries((0..3).map(|i| {
            (
                format!("{i} Elm St"),
                GeocodeResult {
                    geocode: Geocode::new(37.0, -122.0).unwrap(),
                    match_quality: MatchQuality::Approximate,
                },
            )
        }));
        let out = geocode_inventory(&Geocoder::new(provider), &inv);
        assert!(out.failures.is_empty());
        assert!(out.inventory.records().iter().all(|r| r.geocode.is_some()));
    }
}

//! Regional probability surfaces from per-building predictions.
//!
//! Grids are anchored at the north-west corner of the bounding box: row 0 is
//! the northernmost row and cell `(0, 0)` is centered at
//! `(max_lat − cell/2, min_lon + cell/2)`. When the extent is not a whole
//! number of cells the grid overhangs to the south and east.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::bim::{AttributeKind, BimError, Geocode, Inventory};
use crate::par_map;
use crate::surf::impute::{fit_engine_variogram, ImputeConfig};
use crate::surf::{krige, NeighborIndex, SpatialSample, SurfError, VariogramModel};

pub const NODATA: f64 = -9999.0;
pub const MAX_CELLS: f64 = 1e7;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid bounding box: {0}")]
    InvalidBbox(String),
    #[error("cell size must be positive and finite, got {0}")]
    InvalidCellSize(f64),
    #[error("no geocoded record carries a numeric `{0}`")]
    NoUsableRecords(String),
    #[error("record `{id}`: `{attribute}` = {value} is not a probability in [0, 1]")]
    NotProbability { id: String, attribute: String, value: f64 },
    #[error("grid would have {0:.0} cells, above the {MAX_CELLS:.0} budget; use a larger cell size")]
    TooManyCells(f64),
    #[error("values length {got} does not match {nrows} x {ncols}")]
    Shape { nrows: usize, ncols: usize, got: usize },
    #[error("ASCII grid line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Bim(#[from] BimError),
    #[error(transparent)]
    Surf(#[from] SurfError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RasterError + '_ {
    move |source| RasterError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn new(min_lat: f64, max_lat: f64, min_lon: f64, max_lon: f64) -> Result<Self, RasterError> {
        let b = Self {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        };
        if ![min_lat, max_lat, min_lon, max_lon].iter().all(|v| v.is_finite()) {
            return Err(RasterError::InvalidBbox("non-finite bound".into()));
        }
        if min_lat >= max_lat || min_lon >= max_lon {
            return Err(RasterError::InvalidBbox(format!("min must be below max: {b}")));
        }
        Ok(b)
    }

    /// Extent of `points` padded by `pad` of each side's span. A zero span is
    /// padded by `min_pad` instead.
    pub fn around(points: &[Geocode], pad: f64, min_pad: f64) -> Result<Self, RasterError> {
        if points.is_empty() {
            return Err(RasterError::InvalidBbox("no points".into()));
        }
        let (mut lo_lat, mut hi_lat, mut lo_lon, mut hi_lon) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in points {
            lo_lat = lo_lat.min(p.lat());
            hi_lat = hi_lat.max(p.lat());
            lo_lon = lo_lon.min(p.lon());
            hi_lon = hi_lon.max(p.lon());
        }
        let d_lat = ((hi_lat - lo_lat) * pad).max(if hi_lat > lo_lat { 0.0 } else { min_pad });
        let d_lon = ((hi_lon - lo_lon) * pad).max(if hi_lon > lo_lon { 0.0 } else { min_pad });
        Self::new(lo_lat - d_lat, hi_lat + d_lat, lo_lon - d_lon, hi_lon + d_lon)
    }

    pub fn contains(&self, g: Geocode) -> bool {
        (self.min_lat..=self.max_lat).contains(&g.lat()) && (self.min_lon..=self.max_lon).contains(&g.lon())
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.min_lon, self.min_lat, self.max_lon, self.max_lat)
    }
}

/// Parses `min_lon,min_lat,max_lon,max_lat` (GeoJSON bbox order).
impl FromStr for BoundingBox {
    type Err = RasterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| RasterError::InvalidBbox(format!("`{s}`: {e}")))?;
        let [min_lon, min_lat, max_lon, max_lat] = parts[..] else {
            return Err(RasterError::InvalidBbox(format!("`{s}`: expected min_lon,min_lat,max_lon,max_lat")));
        };
        Self::new(min_lat, max_lat, min_lon, max_lon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    pub ncols: usize,
    pub nrows: usize,
    /// Western edge (longitude).
    pub xllcorner: f64,
    /// Southern edge (latitude).
    pub yllcorner: f64,
    pub cell_size: f64,
    /// Row-major, north to south.
    values: Vec<f64>,
}

impl RasterGrid {
    pub fn new(
        ncols: usize,
        nrows: usize,
        xllcorner: f64,
        yllcorner: f64,
        cell_size: f64,
        values: Vec<f64>,
    ) -> Result<Self, RasterError> {
        if ncols == 0 || nrows == 0 || values.len() != ncols * nrows {
            return Err(RasterError::Shape {
                nrows,
                ncols,
                got: values.len(),
            });
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(RasterError::InvalidCellSize(cell_size));
        }
        Ok(Self {
            ncols,
            nrows,
            xllcorner,
            yllcorner,
            cell_size,
            values,
        })
    }

    /// A nodata grid covering `bbox`, anchored at its north-west corner.
    pub fn covering(bbox: &BoundingBox, cell_size: f64) -> Result<Self, RasterError> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(RasterError::InvalidCellSize(cell_size));
        }
        let cols = ((bbox.max_lon - bbox.min_lon) / cell_size).ceil().max(1.0);
        let rows = ((bbox.max_lat - bbox.min_lat) / cell_size).ceil().max(1.0);
        if cols * rows > MAX_CELLS {
            return Err(RasterError::TooManyCells(cols * rows));
        }
        let (ncols, nrows) = (cols as usize, rows as usize);
        Ok(Self {
            ncols,
            nrows,
            xllcorner: bbox.min_lon,
            yllcorner: bbox.max_lat - nrows as f64 * cell_size,
            cell_size,
            values: vec![NODATA; ncols * nrows],
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    pub fn max_lat(&self) -> f64 {
        self.yllcorner + self.nrows as f64 * self.cell_size
    }

    /// `(lat, lon)` of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.max_lat() - (row as f64 + 0.5) * self.cell_size,
            self.xllcorner + (col as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell containing `(lat, lon)`, if inside the grid.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let r = ((self.max_lat() - lat) / self.cell_size).floor();
        let c = ((lon - self.xllcorner) / self.cell_size).floor();
        (r >= 0.0 && c >= 0.0 && (r as usize) < self.nrows && (c as usize) < self.ncols).then(|| (r as usize, c as usize))
    }

    pub fn data_cells(&self) -> usize {
        self.values.iter().filter(|v| **v != NODATA).count()
    }

    /// Row and column of the largest non-nodata value; first in row-major
    /// order on ties.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if v != NODATA && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| (i / self.ncols, i % self.ncols))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceEngine {
    #[default]
    Idw,
    Kriging,
}

impl fmt::Display for SurfaceEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Idw => "idw",
            Self::Kriging => "kriging",
        })
    }
}

impl FromStr for SurfaceEngine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "idw" => Ok(Self::Idw),
            "kriging" => Ok(Self::Kriging),
            other => Err(format!("unknown surface engine `{other}` (expected idw or kriging)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfaceConfig {
    pub engine: SurfaceEngine,
    /// Degrees.
    pub cell_size: f64,
    pub bbox: Option<BoundingBox>,
    /// Meters; `None` means twice the mean nearest-neighbor spacing.
    pub cutoff: Option<f64>,
    pub idw_power: f64,
    pub idw_k: usize,
    /// Variogram and neighborhood settings for the kriging engine.
    pub kriging: ImputeConfig,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            engine: SurfaceEngine::Idw,
            cell_size: 0.001,
            bbox: None,
            cutoff: None,
            idw_power: 2.0,
            idw_k: 12,
            kriging: ImputeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub grid: RasterGrid,
    /// Cutoff radius actually applied, meters.
    pub cutoff: f64,
    pub variogram: Option<VariogramModel>,
}

/// Geocoded records with a numeric value for `attribute`, any provenance.
pub fn probability_samples(inv: &Inventory, attribute: &str) -> Result<Vec<SpatialSample>, RasterError> {
    if inv.kind_of(attribute)? != AttributeKind::Numeric {
        return Err(RasterError::NoUsableRecords(attribute.to_string()));
    }
    let mut out = Vec::new();
    for r in inv.records() {
        let (Some(g), Some(v)) = (r.geocode, r.get(attribute).and_then(|a| a.value.as_f64())) else {
            continue;
        };
        if !(0.0..=1.0).contains(&v) {
            return Err(RasterError::NotProbability {
                id: r.id.clone(),
                attribute: attribute.to_string(),
                value: v,
            });
        }
        out.push(SpatialSample::new(g, v)?);
    }
    if out.is_empty() {
        return Err(RasterError::NoUsableRecords(attribute.to_string()));
    }
    Ok(out)
}

/// Twice the mean nearest-neighbor spacing in meters; infinite when it is
/// undefined (one point) or zero (all points coincide).
pub fn default_cutoff(index: &NeighborIndex) -> f64 {
    if index.len() < 2 {
        return f64::INFINITY;
    }
    let idx: Vec<usize> = (0..index.len()).collect();
    let total: f64 = par_map(&idx, |&i| {
        index
            .query_excluding(index.samples()[i].location, 1, Some(i))
            .map(|c| c.neighbors[0].distance)
            .unwrap_or(0.0)
    })
    .iter()
    .sum();
    let mean = total / index.len() as f64;
    if mean > 0.0 {
        2.0 * mean
    } else {
        f64::INFINITY
    }
}

/// Power-`p` inverse distance weighting over the context; a zero distance
/// returns that sample's value.
pub fn idw(values_distances: impl Iterator<Item = (f64, f64)>, power: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (v, d) in values_distances {
        if d == 0.0 {
            return v;
        }
        let w = d.powf(-power);
        num += w * v;
        den += w;
    }
    num / den
}

/// Interpolates `attribute` onto a grid. Cells whose center lies farther
/// than the cutoff from every building are nodata.
pub fn probability_surface(inv: &Inventory, attribute: &str, cfg: &SurfaceConfig) -> Result<Surface, RasterError> {
    if !(cfg.cell_size.is_finite() && cfg.cell_size > 0.0) {
        return Err(RasterError::InvalidCellSize(cfg.cell_size));
    }
    let samples = probability_samples(inv, attribute)?;
    let bbox = match cfg.bbox {
        Some(b) => b,
        None => BoundingBox::around(&samples.iter().map(|s| s.location).collect::<Vec<_>>(), 0.05, cfg.cell_size)?,
    };
    let mut grid = RasterGrid::covering(&bbox, cfg.cell_size)?;
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.value), hi.max(s.value)));
    let variogram = match cfg.engine {
        SurfaceEngine::Kriging if samples.len() > 1 => Some(fit_engine_variogram(&samples, &cfg.kriging)?.model),
        _ => None,
    };
    let index = NeighborIndex::new(samples);
    let cutoff = cfg.cutoff.unwrap_or_else(|| default_cutoff(&index));
    log::info!(
        "rasterizing {} x {} cells from {} points (cutoff {:.1} m)",
        grid.nrows,
        grid.ncols,
        index.len(),
        cutoff
    );

    let rows: Vec<usize> = (0..grid.nrows).collect();
    let g = &grid;
    let computed = par_map(&rows, |&row| -> Result<Vec<f64>, RasterError> {
        let mut out = Vec::with_capacity(g.ncols);
        for col in 0..g.ncols {
            let (lat, lon) = g.cell_center(row, col);
            let target = Geocode::new(lat.clamp(-90.0, 90.0), lon)?;
            let k = match cfg.engine {
                SurfaceEngine::Idw => cfg.idw_k,
                SurfaceEngine::Kriging => cfg.kriging.k,
            };
            let ctx = index.query(target, k.max(1))?;
            if ctx.neighbors[0].distance > cutoff {
                out.push(NODATA);
                continue;
            }
            let v = match &variogram {
                Some(m) => krige(m, &ctx)?.mean,
                None => idw(ctx.neighbors.iter().map(|n| (n.sample.value, n.distance)), cfg.idw_power),
            };
            // kriging weights may be negative; keep the surface a probability
            out.push(v.clamp(lo, hi));
        }
        Ok(out)
    });
    grid.values.clear();
    for row in computed {
        grid.values.extend(row?);
    }
    Ok(Surface {
        grid,
        cutoff,
        variogram,
    })
}

/// `%g`-style formatting with `sig` significant digits.
pub fn format_sig(v: f64, sig: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{:.*e}", sig - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= sig as i32 {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        trim(&format!("{:.*}", (sig as i32 - 1 - exp).max(0) as usize, v))
    }
}

pub fn write_ascii_grid(grid: &RasterGrid, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "ncols {}", grid.ncols)?;
    writeln!(w, "nrows {}", grid.nrows)?;
    writeln!(w, "xllcorner {}", grid.xllcorner)?;
    writeln!(w, "yllcorner {}", grid.yllcorner)?;
    writeln!(w, "cellsize {}", grid.cell_size)?;
    writeln!(w, "NODATA_value {}", NODATA)?;
    let mut line = String::new();
    for row in grid.values.chunks(grid.ncols) {
        line.clear();
        for (i, &v) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&if v == NODATA { "-9999".to_string() } else { format_sig(v, 6) });
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// ESRI ASCII grid; cell values carry 6 significant digits.
pub fn export_ascii_grid(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    write_ascii_grid(grid, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_ascii_grid(r: impl Read) -> Result<RasterGrid, RasterError> {
    let perr = |line: usize, reason: String| RasterError::Parse { line, reason };
    let mut header = std::collections::HashMap::new();
    let mut values = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| perr(n, e.to_string()))?;
        let mut tokens = line.split_whitespace().peekable();
        let Some(first) = tokens.peek() else { continue };
        if values.is_empty() && first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
            let key = tokens.next().expect("peeked").to_ascii_lowercase();
            let val: f64 = tokens
                .next()
                .ok_or_else(|| perr(n, format!("`{key}` has no value")))?
                .parse()
                .map_err(|e| perr(n, format!("`{key}`: {e}")))?;
            header.insert(key, val);
            continue;
        }
        for t in tokens {
            values.push(t.parse::<f64>().map_err(|e| perr(n, format!("`{t}`: {e}")))?);
        }
    }
    let get = |k: &str| header.get(k).copied().ok_or_else(|| perr(0, format!("missing header `{k}`")));
    let nodata = header.get("nodata_value").copied().unwrap_or(NODATA);
    let values = values.into_iter().map(|v| if v == nodata { NODATA } else { v }).collect();
    RasterGrid::new(
        get("ncols")? as usize,
        get("nrows")? as usize,
        get("xllcorner")?,
        get("yllcorner")?,
        get("cellsize")?,
        values,
    )
}

pub fn parse_ascii_grid(path: impl AsRef<Path>) -> Result<RasterGrid, RasterError> {
    let path = path.as_ref();
    read_ascii_grid(File::open(path).map_err(io_err(path))?)
}

/// One counter-clockwise Polygon per data cell at or above `threshold`.
pub fn cells_to_geojson(grid: &RasterGrid, threshold: Option<f64>) -> serde_json::Value {
    let c = grid.cell_size;
    let mut features = Vec::new();
    for row in 0..grid.nrows {
        for col in 0..grid.ncols {
            let v = grid.get(row, col);
            if v == NODATA || threshold.is_some_and(|t| v < t) {
                continue;
            }
            let north = grid.max_lat() - row as f64 * c;
            let (south, west) = (north - c, grid.xllcorner + col as f64 * c);
            let east = west + c;
            features.push(json!({
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[west, south], [east, south], [east, north], [west, north], [west, south]]],
                },
                "properties": {"probability": v, "row": row, "col": col},
            }));
        }
    }
    json!({"type": "FeatureCollection", "features": features})
}

pub fn export_geojson_cells(grid: &RasterGrid, path: impl AsRef<Path>, threshold: Option<f64>) -> Result<usize, RasterError> {
    let path = path.as_ref();
    let doc = cells_to_geojson(grid, threshold);
    let n = doc["features"].as_array().map_or(0, Vec::len);
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    serde_json::to_writer(&mut w, &doc)?;
    w.flush().map_err(io_err(path))?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bim::{AttributeValue, BuildingRecord, Provenance, Schema};

    fn inventory(points: &[(f64, f64, f64)]) -> Inventory {
        let schema: Schema = [("p".to_string(), AttributeKind::Numeric)].into_iter().collect();
        let recs = points
            .iter()
            .enumerate()
            .map(|(i, &(lat, lon, p))| {
                BuildingRecord::new(format!("b{i}"))
                    .with_geocode(Geocode::new(lat, lon).unwrap())
                    .with_attribute("p", AttributeValue::numeric(p).unwrap(), Provenance::vision(0.9).unwrap())
            })
            .collect();
        Inventory::new(schema, recs).unwrap()
    }

    fn ascii(grid: &RasterGrid) -> String {
        let mut buf = Vec::new();
        write_ascii_grid(grid, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn sig_formatting() {
        assert_eq!(format_sig(0.5, 6), "0.5");
        assert_eq!(format_sig(1.0, 6), "1");
        assert_eq!(format_sig(0.123456789, 6), "0.123457");
        assert_eq!(format_sig(0.0001234567, 6), "0.000123457");
        assert_eq!(format_sig(0.00001234567, 6), "1.23457e-05");
        assert_eq!(format_sig(1234567.0, 6), "1.23457e+06");
        assert_eq!(format_sig(0.0, 6), "0");
    }

    #[test]
    fn single_cell_export() {
        let g = RasterGrid::new(1, 1, -122.3, 37.8, 0.01, vec![0.5]).unwrap();
        let text = ascii(&g);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[..6],
            ["ncols 1", "nrows 1", "xllcorner -122.3", "yllcorner 37.8", "cellsize 0.01", "NODATA_value -9999"]
        );
        assert_eq!(lines[6..], ["0.5"]);
        let nd = RasterGrid::new(2, 1, 0.0, 0.0, 1.0, vec![NODATA, 0.25]).unwrap();
        assert_eq!(ascii(&nd).lines().last(), Some("-9999 0.25"));
    }

    #[test]
    fn constant_probability_surface() {
        let inv = inventory(&[(37.80, -122.27, 0.3), (37.81, -122.26, 0.3), (37.805, -122.28, 0.3), (37.79, -122.25, 0.3)]);
        let s = probability_surface(&inv, "p", &SurfaceConfig::default()).unwrap();
        assert!(s.grid.data_cells() > 0);
        assert!(s.grid.values().iter().all(|&v| v == NODATA || (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn single_building_cell_is_max() {
        let inv = inventory(&[(37.8012, -122.2655, 0.7)]);
        let s = probability_surface(&inv, "p", &SurfaceConfig::default()).unwrap();
        let (r, c) = s.grid.cell_of(37.8012, -122.2655).unwrap();
        let max = s.grid.values().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(s.grid.get(r, c), max);
    }

    #[test]
    fn georeferencing_relocates_the_peak() {
        let bbox = BoundingBox::new(37.70, 37.90, -122.40, -122.10).unwrap();
        let peak = (37.8436, -122.2117);
        let inv = inventory(&[(peak.0, peak.1, 1.0), (37.72, -122.38, 0.0), (37.88, -122.12, 0.0), (37.71, -122.11, 0.0)]);
        let cfg = SurfaceConfig {
            bbox: Some(bbox),
            cell_size: 0.004,
            cutoff: Some(f64::INFINITY),
            ..Default::default()
        };
        let g = probability_surface(&inv, "p", &cfg).unwrap().grid;
        let (lat0, lon0) = g.cell_center(0, 0);
        assert!((lat0 - (37.90 - 0.002)).abs() < 1e-9 && (lon0 - (-122.40 + 0.002)).abs() < 1e-9);
        let (r, c) = g.argmax().unwrap();
        let (lat, lon) = g.cell_center(r, c);
        assert!((lat - peak.0).abs() <= 0.002 + 1e-12 && (lon - peak.1).abs() <= 0.002 + 1e-12);
    }

    #[test]
    fn idw_stays_within_input_range() {
        let pts: Vec<_> = (0..40)
            .map(|i| {
                let t = i as f64;
                (37.8 + (t * 0.37).sin() * 0.01, -122.27 + (t * 0.71).cos() * 0.01, 0.2 + 0.5 * ((t * 1.3).sin() * 0.5 + 0.5))
            })
            .collect();
        let lo = pts.iter().map(|p| p.2).fold(1.0, f64::min);
        let hi = pts.iter().map(|p| p.2).fold(0.0, f64::max);
        let g = probability_surface(&inventory(&pts), "p", &SurfaceConfig { cell_size: 0.0005, ..Default::default() })
            .unwrap()
            .grid;
        assert!(g.values().iter().all(|&v| v == NODATA || (lo..=hi).contains(&v)));
    }

    #[test]
    fn cutoff_masks_far_cells() {
        let inv = inventory(&[(37.80, -122.30, 0.4), (37.8005, -122.30, 0.6), (37.80, -122.20, 0.5), (37.8005, -122.20, 0.5)]);
        let s = probability_surface(&inv, "p", &SurfaceConfig::default()).unwrap();
        let (r, c) = s.grid.cell_of(37.80, -122.25).unwrap();
        assert_eq!(s.grid.get(r, c), NODATA);
        assert!((s.cutoff - 2.0 * 55.6).abs() < 1.0);
    }

    #[test]
    fn errors() {
        let inv = inventory(&[(37.8, -122.27, 0.3)]);
        let huge = SurfaceConfig {
            bbox: Some(BoundingBox::new(30.0, 40.0, -125.0, -115.0).unwrap()),
            cell_size: 0.001,
            ..Default::default()
        };
        assert!(matches!(probability_surface(&inv, "p", &huge), Err(RasterError::TooManyCells(_))));
        assert!(probability_surface(&inv, "missing", &SurfaceConfig::default()).is_err());
        let bad = inventory(&[(37.8, -122.27, 1.3)]);
        assert!(matches!(probability_surface(&bad, "p", &SurfaceConfig::default()), Err(RasterError::NotProbability { .. })));
        assert!("1,2,3".parse::<BoundingBox>().is_err());
        assert!("-122.3,37.9,-122.2,37.8".parse::<BoundingBox>().is_err());
        assert_eq!(
            "-122.3,37.7,-122.2,37.8".parse::<BoundingBox>().unwrap(),
            BoundingBox::new(37.7, 37.8, -122.3, -122.2).unwrap()
        );
    }

    #[test]
    fn geojson_cells() {
        let empty = RasterGrid::new(2, 2, 0.0, 0.0, 1.0, vec![NODATA; 4]).unwrap();
        assert_eq!(cells_to_geojson(&empty, None)["features"].as_array().unwrap().len(), 0);

        let g = RasterGrid::new(3, 3, 0.0, 0.0, 1.0, vec![0.1, 0.5, 0.9, NODATA, 0.49, 0.51, 0.0, 1.0, NODATA]).unwrap();
        assert_eq!(cells_to_geojson(&g, Some(0.0))["features"].as_array().unwrap().len(), g.data_cells());
        // hand count of cells >= 0.5: 0.5, 0.9, 0.51, 1.0
        let doc = cells_to_geojson(&g, Some(0.5));
        let feats = doc["features"].as_array().unwrap();
        assert_eq!(feats.len(), 4);
        // top-left cell of the 3x3 grid spans lon [0,1], lat [2,3]
        let ring = &cells_to_geojson(&g, None)["features"][0]["geometry"]["coordinates"][0];
        assert_eq!(ring, &json!([[0.0, 2.0], [1.0, 2.0], [1.0, 3.0], [0.0, 3.0], [0.0, 2.0]]));
    }
}

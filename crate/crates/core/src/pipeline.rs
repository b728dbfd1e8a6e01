//! Declarative end-to-end run: ingest, geocode, merge, impute, self-train,
//! rasterize, report.
//!
//! Relative paths in a config are resolved against the config file's
//! directory. The global seed replaces every stage seed before any
//! stochastic step runs, so one seed determines all outputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bim::{merge_inventories, missing_report, BimError, Inventory, MergePolicy, Schema};
use crate::geocode::{geocode_inventory, FileProvider, GeocodeError, GeocodeProvider, Geocoder};
use crate::ingest::{self, export_geojson, infer_spec_from_path, write_rejects, CsvSchemaSpec, IngestError, MissingGeocode};
use crate::raster::{self, RasterError, SurfaceConfig, SurfaceEngine};
use crate::selftrain::{self, Metrics, RoundReport, SelfTrainConfig, SelfTrainError};
use crate::surf::{impute, Engine, ImputeConfig, SurfError, VariogramModel};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("{0} already exists; pass --force to overwrite")]
    OutputExists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Geocode(#[from] GeocodeError),
    #[error(transparent)]
    Bim(#[from] BimError),
    #[error(transparent)]
    Surf(#[from] SurfError),
    #[error(transparent)]
    SelfTrain(#[from] SelfTrainError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsConfig {
    pub metadata: PathBuf,
    /// Inferred from the header when absent.
    #[serde(default)]
    pub metadata_spec: Option<CsvSchemaSpec>,
    #[serde(default)]
    pub vision: Option<PathBuf>,
    #[serde(default)]
    pub vision_spec: Option<CsvSchemaSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Offline `address,lat,lon[,quality]` table.
    File,
    /// Remote JSON geocoding API; key from `GEOCODER_API_KEY`.
    Http,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeocoderConfig {
    pub provider: ProviderKind,
    pub table: Option<PathBuf>,
    pub endpoint: Option<String>,
    /// JSONL cache shared across runs.
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeStep {
    pub attribute: String,
    pub engine: Engine,
    /// Clip numeric predictions to the observed range.
    #[serde(default)]
    pub clamp: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfBlock {
    pub steps: Vec<ImputeStep>,
    pub config: ImputeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelftrainBlock {
    pub labeled: PathBuf,
    pub unlabeled: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub config: SelfTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterBlock {
    pub attribute: String,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub surface: SurfaceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub inputs: InputsConfig,
    #[serde(default)]
    pub geocoder: GeocoderConfig,
    #[serde(default)]
    pub merge_policy: MergePolicy,
    #[serde(default)]
    pub surf: SurfBlock,
    #[serde(default)]
    pub selftrain: Option<SelftrainBlock>,
    #[serde(default)]
    pub raster: Option<RasterBlock>,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Reads a config file and resolves its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| PipelineError::Config {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        rebase(base, &mut self.output_dir);
        rebase(base, &mut self.inputs.metadata);
        if let Some(v) = self.inputs.vision.as_mut() {
            rebase(base, v);
        }
        for p in [self.geocoder.table.as_mut(), self.geocoder.cache.as_mut()].into_iter().flatten() {
            rebase(base, p);
        }
        if let Some(st) = self.selftrain.as_mut() {
            rebase(base, &mut st.labeled);
            rebase(base, &mut st.unlabeled);
            if let Some(t) = st.test.as_mut() {
                rebase(base, t);
            }
        }
    }

    /// Copies the global seed into every stage.
    pub fn apply_seed(&mut self) {
        let s = self.seed;
        self.surf.config.seed = s;
        self.surf.config.mlp.seed = s;
        if let Some(st) = self.selftrain.as_mut() {
            st.config.training.seed = s;
        }
        if let Some(r) = self.raster.as_mut() {
            r.surface.kriging.seed = s;
            r.surface.kriging.mlp.seed = s;
        }
    }

    /// Checks that every referenced input exists.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut inputs = vec![&self.inputs.metadata];
        inputs.extend(&self.inputs.vision);
        if self.geocoder.provider == ProviderKind::File {
            match &self.geocoder.table {
                Some(t) => inputs.push(t),
                None => return Err(self.config_err("geocoder.provider = file needs geocoder.table")),
            }
        }
        if self.geocoder.provider == ProviderKind::Http && self.geocoder.endpoint.is_none() {
            return Err(self.config_err("geocoder.provider = http needs geocoder.endpoint"));
        }
        if let Some(st) = &self.selftrain {
            inputs.push(&st.labeled);
            inputs.push(&st.unlabeled);
            inputs.extend(&st.test);
        }
        for p in inputs {
            if !p.is_file() {
                return Err(self.config_err(&format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn config_err(&self, reason: &str) -> PipelineError {
        PipelineError::Config {
            path: self.output_dir.display().to_string(),
            reason: reason.to_string(),
        }
    }

    /// Output files this config produces, in write order.
    pub fn outputs(&self) -> Vec<PathBuf> {
        let d = &self.output_dir;
        let mut out = vec![d.join(OUT_REJECTS_METADATA)];
        if self.inputs.vision.is_some() {
            out.push(d.join(OUT_REJECTS_VISION));
        }
        out.push(d.join(OUT_INVENTORY));
        if self.selftrain.is_some() {
            out.push(d.join(OUT_LABELS));
            out.push(d.join(OUT_MODEL));
        }
        if self.raster.is_some() {
            out.push(d.join(OUT_GRID));
            out.push(d.join(OUT_CELLS));
        }
        out.push(d.join(OUT_REPORT));
        out
    }
}

pub const OUT_REJECTS_METADATA: &str = "rejects_metadata.jsonl";
pub const OUT_REJECTS_VISION: &str = "rejects_vision.jsonl";
pub const OUT_INVENTORY: &str = "inventory.geojson";
pub const OUT_LABELS: &str = "selftrain_labels.csv";
pub const OUT_MODEL: &str = "selftrain_model.json";
pub const OUT_GRID: &str = "surface.asc";
pub const OUT_CELLS: &str = "surface_cells.geojson";
pub const OUT_REPORT: &str = "report.json";

/// Refuses to replace existing files unless `force` is set.
pub fn check_overwrite<'a>(paths: impl IntoIterator<Item = &'a Path>, force: bool) -> Result<(), PipelineError> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(PipelineError::OutputExists(p.to_path_buf()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingRates {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InventorySummary {
    pub records: usize,
    pub geocoded: usize,
    /// Per attribute: share of records without a value.
    pub missing: BTreeMap<String, MissingRates>,
    /// Per attribute: value count by provenance source.
    pub sources: BTreeMap<String, BTreeMap<String, usize>>,
}

fn source_name(p: &crate::bim::Provenance) -> &'static str {
    match p {
        crate::bim::Provenance::Metadata => "metadata",
        crate::bim::Provenance::Vision { .. } => "vision",
        crate::bim::Provenance::Imputed { .. } => "imputed",
    }
}

/// Record counts, missing rates and provenance counts of `after`; missing
/// rates of `before` when given, otherwise of `after`.
pub fn summarize(before: Option<&Inventory>, after: &Inventory) -> Result<InventorySummary, BimError> {
    let schema: &Schema = after.schema();
    let mut missing = BTreeMap::new();
    let mut sources = BTreeMap::new();
    for name in schema.keys() {
        let a = missing_report(after, name)?.missing_rate();
        let b = match before {
            Some(inv) if inv.schema().contains_key(name) => missing_report(inv, name)?.missing_rate(),
            _ => a,
        };
        missing.insert(name.clone(), MissingRates { before: b, after: a });
        let mut counts = BTreeMap::new();
        for r in after.records() {
            if let Some(attr) = r.get(name) {
                *counts.entry(source_name(&attr.provenance).to_string()).or_insert(0) += 1;
            }
        }
        sources.insert(name.clone(), counts);
    }
    Ok(InventorySummary {
        records: after.len(),
        geocoded: after.records().iter().filter(|r| r.geocode.is_some()).count(),
        missing,
        sources,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestCounts {
    pub metadata_records: usize,
    pub metadata_rejects: usize,
    pub vision_records: usize,
    pub vision_rejects: usize,
    pub merged_records: usize,
    pub geocode_attempted: usize,
    pub geocode_failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeSummary {
    pub attribute: String,
    pub engine: Engine,
    pub imputed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variogram: Option<VariogramModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftrainSummary {
    pub seed_labeled: usize,
    pub final_labeled: usize,
    pub pool_remaining: usize,
    /// Held-out metrics of the first-round classifier, trained on the seed
    /// set alone.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_only: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_model: Option<Metrics>,
    pub rounds: Vec<RoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterSummary {
    pub attribute: String,
    pub engine: SurfaceEngine,
    pub nrows: usize,
    pub ncols: usize,
    pub cell_size: f64,
    pub data_cells: usize,
    pub cells_exported: usize,
    pub cutoff_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub ingest: IngestCounts,
    pub inventory: InventorySummary,
    pub imputation: Vec<ImputeSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selftrain: Option<SelftrainSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raster: Option<RasterSummary>,
    /// Output file names relative to the output directory.
    pub outputs: Vec<String>,
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Builds the configured geocoding provider.
pub fn build_provider(cfg: &GeocoderConfig) -> Result<Option<Box<dyn GeocodeProvider>>, PipelineError> {
    match cfg.provider {
        ProviderKind::None => Ok(None),
        ProviderKind::File => {
            let table = cfg.table.as_ref().ok_or_else(|| PipelineError::Config {
                path: "geocoder".into(),
                reason: "file provider needs a table".into(),
            })?;
            Ok(Some(Box::new(FileProvider::from_path(table)?)))
        }
        ProviderKind::Http => http_provider(cfg),
    }
}

#[cfg(feature = "http")]
fn http_provider(cfg: &GeocoderConfig) -> Result<Option<Box<dyn GeocodeProvider>>, PipelineError> {
    let endpoint = cfg.endpoint.clone().ok_or_else(|| PipelineError::Config {
        path: "geocoder".into(),
        reason: "http provider needs an endpoint".into(),
    })?;
    let key = std::env::var(crate::geocode::API_KEY_ENV).map_err(|_| PipelineError::Config {
        path: "geocoder".into(),
        reason: format!("{} is not set", crate::geocode::API_KEY_ENV),
    })?;
    Ok(Some(Box::new(crate::geocode::HttpProvider::new(endpoint, key, crate::geocode::UreqTransport::default()))))
}

#[cfg(not(feature = "http"))]
fn http_provider(_: &GeocoderConfig) -> Result<Option<Box<dyn GeocodeProvider>>, PipelineError> {
    Err(PipelineError::Config {
        path: "geocoder".into(),
        reason: "built without the `http` feature".into(),
    })
}

fn load_csv(path: &Path, spec: &Option<CsvSchemaSpec>, vision: bool) -> Result<ingest::Parsed, PipelineError> {
    let spec = match spec {
        Some(s) => s.clone(),
        None => infer_spec_from_path(path)?,
    };
    Ok(if vision {
        ingest::parse_vision_csv(path, &spec)?
    } else {
        ingest::parse_metadata_csv(path, &spec)?
    })
}

/// Runs every configured stage and writes the outputs. `cfg` must already
/// have its paths resolved.
pub fn run_pipeline(cfg: &PipelineConfig, force: bool) -> Result<PipelineReport, PipelineError> {
    let mut cfg = cfg.clone();
    cfg.apply_seed();
    cfg.validate()?;
    let outputs = cfg.outputs();
    check_overwrite(outputs.iter().map(PathBuf::as_path), force)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;

    // ingest
    let meta = load_csv(&cfg.inputs.metadata, &cfg.inputs.metadata_spec, false)?;
    write_rejects(out.join(OUT_REJECTS_METADATA), &meta.rejects)?;
    let vision = match &cfg.inputs.vision {
        Some(p) => {
            let v = load_csv(p, &cfg.inputs.vision_spec, true)?;
            write_rejects(out.join(OUT_REJECTS_VISION), &v.rejects)?;
            Some(v)
        }
        None => None,
    };
    log::info!(
        "ingested {} metadata and {} vision record(s)",
        meta.inventory.len(),
        vision.as_ref().map_or(0, |v| v.inventory.len())
    );

    // geocode the metadata; vision rows carry their own coordinates or none
    let geocode_attempted = meta.inventory.records().iter().filter(|r| r.geocode.is_none()).count();
    let (metadata_inv, failures) = match build_provider(&cfg.geocoder)? {
        Some(provider) => {
            let geocoder = match &cfg.geocoder.cache {
                Some(c) => Geocoder::with_cache_file(provider, c)?,
                None => Geocoder::new(provider),
            };
            let g = geocode_inventory(&geocoder, &meta.inventory);
            (g.inventory, g.failures)
        }
        None => (meta.inventory.clone(), Vec::new()),
    };

    // merge
    let merged = match &vision {
        Some(v) => merge_inventories(&metadata_inv, &v.inventory, cfg.merge_policy)?,
        None => metadata_inv,
    };

    // impute
    let mut inv = merged.clone();
    let mut imputation = Vec::new();
    for step in &cfg.surf.steps {
        let icfg = ImputeConfig {
            clamp_to_observed: step.clamp,
            ..cfg.surf.config.clone()
        };
        let res = impute(&inv, &step.attribute, step.engine, &icfg)?;
        imputation.push(ImputeSummary {
            attribute: step.attribute.clone(),
            engine: step.engine,
            imputed: res.imputed.len(),
            variogram: res.variogram.map(|f| f.model),
        });
        inv = res.inventory;
    }
    export_geojson(&inv, out.join(OUT_INVENTORY), MissingGeocode::NullGeometry)?;

    // self-train
    let selftrain = match &cfg.selftrain {
        Some(st) => {
            let seed = selftrain::read_labeled_csv(&st.labeled)?;
            let pool = selftrain::read_unlabeled_csv(&st.unlabeled)?;
            let test = st.test.as_ref().map(selftrain::read_labeled_csv).transpose()?;
            let outcome = selftrain::self_train_loop(&seed, &pool, &st.config, test.as_ref())?;
            selftrain::write_labels_csv(out.join(OUT_LABELS), &outcome.labeled)?;
            write_json(&out.join(OUT_MODEL), &outcome.model.model)?;
            Some(SelftrainSummary {
                seed_labeled: seed.len(),
                final_labeled: outcome.labeled.len(),
                pool_remaining: outcome.remaining.len(),
                seed_only: outcome.rounds.first().and_then(|r| r.eval),
                final_model: outcome.rounds.last().and_then(|r| r.eval),
                rounds: outcome.rounds,
            })
        }
        None => None,
    };

    // rasterize
    let raster = match &cfg.raster {
        Some(rb) => {
            let surface = raster::probability_surface(&inv, &rb.attribute, &rb.surface)?;
            raster::export_ascii_grid(&surface.grid, out.join(OUT_GRID))?;
            let cells = raster::export_geojson_cells(&surface.grid, out.join(OUT_CELLS), rb.threshold)?;
            Some(RasterSummary {
                attribute: rb.attribute.clone(),
                engine: rb.surface.engine,
                nrows: surface.grid.nrows,
                ncols: surface.grid.ncols,
                cell_size: surface.grid.cell_size,
                data_cells: surface.grid.data_cells(),
                cells_exported: cells,
                cutoff_m: surface.cutoff,
            })
        }
        None => None,
    };

    let report = PipelineReport {
        seed: cfg.seed,
        ingest: IngestCounts {
            metadata_records: meta.inventory.len(),
            metadata_rejects: meta.rejects.len(),
            vision_records: vision.as_ref().map_or(0, |v| v.inventory.len()),
            vision_rejects: vision.as_ref().map_or(0, |v| v.rejects.len()),
            merged_records: merged.len(),
            geocode_attempted,
            geocode_failures: failures,
        },
        inventory: summarize(Some(&merged), &inv)?,
        imputation,
        selftrain,
        raster,
        outputs: outputs
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
    };
    write_json(&out.join(OUT_REPORT), &report)?;
    Ok(report)
}

/// Config for the bundled synthetic city layout produced by
/// [`crate::synth::SyntheticCity::write_all`].
pub fn synthetic_city_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        output_dir: PathBuf::from("out"),
        inputs: InputsConfig {
            metadata: PathBuf::from("metadata.csv"),
            metadata_spec: Some(crate::synth::metadata_spec()),
            vision: Some(PathBuf::from("vision.csv")),
            vision_spec: Some(crate::synth::vision_spec()),
        },
        geocoder: GeocoderConfig {
            provider: ProviderKind::File,
            table: Some(PathBuf::from("geocode_table.csv")),
            endpoint: None,
            cache: None,
        },
        merge_policy: MergePolicy::MetadataFirst,
        surf: SurfBlock {
            steps: vec![
                ImputeStep {
                    attribute: "stories".into(),
                    engine: Engine::Kriging,
                    clamp: false,
                },
                ImputeStep {
                    attribute: "year_built".into(),
                    engine: Engine::Kriging,
                    clamp: false,
                },
                ImputeStep {
                    attribute: "occupancy".into(),
                    engine: Engine::NeighborMajority,
                    clamp: false,
                },
                ImputeStep {
                    attribute: "soft_story_prob".into(),
                    engine: Engine::Kriging,
                    clamp: true,
                },
            ],
            config: ImputeConfig::default(),
        },
        selftrain: Some(SelftrainBlock {
            labeled: PathBuf::from("labeled.csv"),
            unlabeled: PathBuf::from("unlabeled.csv"),
            test: Some(PathBuf::from("test.csv")),
            config: SelfTrainConfig::default(),
        }),
        raster: Some(RasterBlock {
            attribute: "soft_story_prob".into(),
            threshold: Some(0.5),
            surface: SurfaceConfig::default(),
        }),
    }
}

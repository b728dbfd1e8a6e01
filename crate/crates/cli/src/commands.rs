use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bimkit::geocode::{geocode_inventory, Geocoder};
use bimkit::ingest::{self, export_geojson, parse_geojson, CsvSchemaSpec, MissingGeocode};
use bimkit::pipeline::{self, check_overwrite, write_json, GeocoderConfig, PipelineConfig, ProviderKind};
use bimkit::raster::{self, BoundingBox, SurfaceConfig, SurfaceEngine};
use bimkit::selftrain::{self, SelfTrainConfig, TrainSettings};
use bimkit::surf::{cross_validate, impute, Engine, ImputeConfig, MlpModel, VariogramFamily};
use bimkit::{merge_inventories, MergePolicy};

use crate::*;

fn guard(paths: &[&Path], force: bool) -> Result<()> {
    check_overwrite(paths.iter().copied(), force)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_inventory(inv: &bimkit::Inventory, path: &Path) -> Result<()> {
    export_geojson(inv, path, MissingGeocode::NullGeometry)?;
    Ok(())
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest(a) => ingest(a),
        Command::Geocode(a) => geocode(a),
        Command::Merge(a) => merge(a),
        Command::Impute(a) => impute_cmd(a),
        Command::CrossValidate(a) => cross_validate_cmd(a),
        Command::Train(a) => train(a),
        Command::Selftrain(a) => selftrain_cmd(a),
        Command::Rasterize(a) => rasterize(a),
        Command::Metrics(a) => metrics(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a),
        Command::Synth(a) => synth(a),
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut outs = vec![a.output.as_path()];
    outs.extend(a.rejects.as_deref());
    guard(&outs, a.force)?;
    let spec: CsvSchemaSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => ingest::infer_spec_from_path(&a.input)?,
    };
    let parsed = match a.kind {
        SourceKind::Metadata => ingest::parse_metadata_csv(&a.input, &spec)?,
        SourceKind::Vision => ingest::parse_vision_csv(&a.input, &spec)?,
    };
    if let Some(r) = &a.rejects {
        ingest::write_rejects(r, &parsed.rejects)?;
    }
    log::info!("{} record(s), {} reject(s)", parsed.inventory.len(), parsed.rejects.len());
    write_inventory(&parsed.inventory, &a.output)
}

fn geocode(a: GeocodeArgs) -> Result<()> {
    let mut outs = vec![a.output.as_path()];
    outs.extend(a.failures.as_deref());
    guard(&outs, a.force)?;
    let cfg = GeocoderConfig {
        provider: if a.table.is_some() { ProviderKind::File } else { ProviderKind::Http },
        table: a.table.clone(),
        endpoint: a.endpoint.clone(),
        cache: a.cache.clone(),
    };
    let provider = pipeline::build_provider(&cfg)?.expect("a provider is always selected");
    let geocoder = match &a.cache {
        Some(c) => Geocoder::with_cache_file(provider, c)?,
        None => Geocoder::new(provider),
    };
    let inv = parse_geojson(&a.input)?;
    let out = geocode_inventory(&geocoder, &inv);
    if !out.failures.is_empty() {
        log::warn!("{} record(s) could not be geocoded", out.failures.len());
    }
    if let Some(f) = &a.failures {
        write_json(f, &out.failures)?;
    }
    write_inventory(&out.inventory, &a.output)
}

fn merge(a: MergeArgs) -> Result<()> {
    guard(&[&a.output], a.force)?;
    let policy = match a.policy {
        Policy::MetadataFirst => MergePolicy::MetadataFirst,
        Policy::VisionFirst => MergePolicy::VisionFirst,
    };
    let merged = merge_inventories(&parse_geojson(&a.metadata)?, &parse_geojson(&a.vision)?, policy)?;
    write_inventory(&merged, &a.output)
}

fn engine(e: EngineArg) -> Engine {
    match e {
        EngineArg::Kriging => Engine::Kriging,
        EngineArg::NeuralNet => Engine::NeuralNet,
        EngineArg::NeighborMajority => Engine::NeighborMajority,
    }
}

fn impute_config(s: &SurfArgs) -> Result<ImputeConfig> {
    let mut cfg: ImputeConfig = match &s.config {
        Some(p) => read_json(p)?,
        None => ImputeConfig::default(),
    };
    if let Some(k) = s.k {
        cfg.k = k;
    }
    if let Some(f) = s.family {
        cfg.family = match f {
            FamilyArg::Exponential => VariogramFamily::Exponential,
            FamilyArg::Gaussian => VariogramFamily::Gaussian,
            FamilyArg::Spherical => VariogramFamily::Spherical,
        };
    }
    if let Some(seed) = s.seed {
        cfg.seed = seed;
        cfg.mlp.seed = seed;
    }
    Ok(cfg)
}

fn impute_cmd(a: ImputeArgs) -> Result<()> {
    guard(&[&a.output], a.force)?;
    let cfg = ImputeConfig {
        clamp_to_observed: a.clamp,
        ..impute_config(&a.surf)?
    };
    let inv = parse_geojson(&a.input)?;
    let out = impute(&inv, &a.surf.attribute, engine(a.surf.engine), &cfg)?;
    if let Some(v) = &out.variogram {
        log::info!(
            "variogram {:?}: nugget {:.4}, sill {:.4}, range {:.1} m",
            v.model.family,
            v.model.nugget,
            v.model.sill,
            v.model.range
        );
    }
    write_inventory(&out.inventory, &a.output)
}

fn cross_validate_cmd(a: CrossValidateArgs) -> Result<()> {
    guard(&[&a.output], a.force)?;
    let cfg = impute_config(&a.surf)?;
    let inv = parse_geojson(&a.input)?;
    let rep = cross_validate(&inv, &a.surf.attribute, engine(a.surf.engine), &cfg, a.folds, cfg.seed)?;
    write_json(&a.output, &rep)?;
    Ok(())
}

fn training(t: &TrainingArgs) -> TrainSettings {
    let mut s = TrainSettings::default();
    if let Some(h) = &t.hidden {
        s.hidden = h.clone();
    }
    if let Some(lr) = t.lr {
        s.lr = lr;
    }
    if let Some(e) = t.stage1_epochs {
        s.stage1_epochs = e;
    }
    if let Some(e) = t.stage2_epochs {
        s.stage2_epochs = e;
    }
    if let Some(seed) = t.seed {
        s.seed = seed;
    }
    s
}

fn train(a: TrainArgs) -> Result<()> {
    guard(&[&a.output], a.force)?;
    let settings = training(&a.training);
    let mut set = selftrain::read_labeled_csv(&a.labeled)?;
    if a.balance {
        set = selftrain::balance(&set, settings.seed)?;
    }
    let trained = selftrain::train_seed(&set, &settings)?;
    if let Some(last) = trained.trace.last() {
        log::info!("final training loss {:.5}", last.loss);
    }
    write_json(&a.output, &trained.model)?;
    Ok(())
}

fn selftrain_cmd(a: SelftrainArgs) -> Result<()> {
    let (labels, model, summary) = (
        a.output_dir.join("labels.csv"),
        a.output_dir.join("model.json"),
        a.output_dir.join("selftrain.json"),
    );
    guard(&[&labels, &model, &summary], a.force)?;
    let cfg = SelfTrainConfig {
        tau: a.tau,
        max_rounds: a.rounds,
        balance: !a.no_balance,
        training: training(&a.training),
    };
    let seed = selftrain::read_labeled_csv(&a.labeled)?;
    let pool = selftrain::read_unlabeled_csv(&a.unlabeled)?;
    let test = a.test.as_ref().map(selftrain::read_labeled_csv).transpose()?;
    let out = selftrain::self_train_loop(&seed, &pool, &cfg, test.as_ref())?;
    std::fs::create_dir_all(&a.output_dir)?;
    selftrain::write_labels_csv(&labels, &out.labeled)?;
    write_json(&model, &out.model.model)?;
    write_json(
        &summary,
        &serde_json::json!({
            "config": cfg,
            "seed_labeled": seed.len(),
            "final_labeled": out.labeled.len(),
            "pool_remaining": out.remaining.len(),
            "rounds": out.rounds,
        }),
    )?;
    Ok(())
}

fn rasterize(a: RasterizeArgs) -> Result<()> {
    let mut outs = vec![a.ascii.as_path()];
    outs.extend(a.geojson.as_deref());
    guard(&outs, a.force)?;
    let mut cfg = SurfaceConfig {
        engine: match a.engine {
            SurfaceArg::Idw => SurfaceEngine::Idw,
            SurfaceArg::Kriging => SurfaceEngine::Kriging,
        },
        cell_size: a.cell_size,
        bbox: a.bbox.as_deref().map(str::parse::<BoundingBox>).transpose()?,
        cutoff: a.cutoff,
        ..SurfaceConfig::default()
    };
    if let Some(seed) = a.seed {
        cfg.kriging.seed = seed;
    }
    let inv = parse_geojson(&a.input)?;
    let s = raster::probability_surface(&inv, &a.attribute, &cfg)?;
    raster::export_ascii_grid(&s.grid, &a.ascii)?;
    if let Some(g) = &a.geojson {
        let n = raster::export_geojson_cells(&s.grid, g, a.threshold)?;
        log::info!("{n} cell polygon(s) written");
    }
    Ok(())
}

fn metrics(a: MetricsArgs) -> Result<()> {
    guard(&[&a.output], a.force)?;
    let data = selftrain::read_labeled_csv(&a.data)?;
    let labels: Vec<usize> = data.items().iter().map(|i| i.label).collect();
    let preds: Vec<usize> = if let Some(m) = &a.model {
        let model: MlpModel = read_json(m)?;
        selftrain::predict_classes(&model, data.items().iter().map(|i| i.features.as_slice()))?
    } else {
        let path = a.predictions.as_ref().expect("clap requires model or predictions");
        let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let mut by_id = HashMap::new();
        for row in rdr.records() {
            let row = row?;
            let p: usize = row
                .get(1)
                .unwrap_or("")
                .trim()
                .parse()
                .with_context(|| format!("{}: bad prediction in row {:?}", path.display(), row))?;
            by_id.insert(row.get(0).unwrap_or("").trim().to_string(), p);
        }
        data.items()
            .iter()
            .map(|i| by_id.get(&i.id).copied().with_context(|| format!("no prediction for `{}`", i.id)))
            .collect::<Result<_>>()?
    };
    let m = selftrain::metrics(&preds, &labels, a.positive)?;
    if m.zero_division {
        log::warn!("a metric had a zero denominator and is reported as 0");
    }
    write_json(&a.output, &m)?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    guard(&[&a.output], a.force)?;
    let after = parse_geojson(&a.inventory)?;
    let before = a.before.as_ref().map(parse_geojson).transpose()?;
    let summary = pipeline::summarize(before.as_ref(), &after)?;
    let mut tables = BTreeMap::new();
    for m in &a.metrics {
        let stem = m.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        tables.insert(stem, read_json::<serde_json::Value>(m)?);
    }
    write_json(&a.output, &serde_json::json!({"inventory": summary, "metrics": tables}))?;
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    let rep = pipeline::run_pipeline(&cfg, a.force)?;
    log::info!(
        "pipeline done: {} record(s), outputs in {}",
        rep.inventory.records,
        cfg.output_dir.display()
    );
    Ok(())
}

const SYNTH_FILES: [&str; 7] = [
    "metadata.csv",
    "vision.csv",
    "geocode_table.csv",
    "labeled.csv",
    "unlabeled.csv",
    "test.csv",
    "pipeline.json",
];

fn synth(a: SynthArgs) -> Result<()> {
    let outs: Vec<PathBuf> = SYNTH_FILES.iter().map(|f| a.output_dir.join(f)).collect();
    guard(&outs.iter().map(PathBuf::as_path).collect::<Vec<_>>(), a.force)?;
    if a.n < 20 {
        bail!("--n must be at least 20");
    }
    let city = bimkit::synth::generate_city(&bimkit::synth::CityConfig {
        n_buildings: a.n,
        seed: a.seed,
        ..Default::default()
    });
    city.write_all(&a.output_dir)?;
    write_json(&a.output_dir.join("pipeline.json"), &pipeline::synthetic_city_config(a.seed))?;
    log::info!("synthetic city with {} building(s) written to {}", a.n, a.output_dir.display());
    Ok(())
}

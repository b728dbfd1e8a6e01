//! Imputation of a missing attribute across an inventory.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{build_with, feature_len, DEFAULT_K};
use super::geo::haversine_distance;
use super::kriging::krige;
use super::mlp::{argmax, train_layers, Activation, Dataset, MlpModel, OutputKind, Stage, Targets, TrainConfig};
use super::neighbors::{NeighborIndex, SpatialSample};
use super::variogram::{empirical_variogram, fit_variogram, VariogramFamily, VariogramFit};
use super::SurfError;
use crate::bim::{
    Attribute, AttributeKind, AttributeValue, BuildingRecord, Geocode, ImputeMethod, Inventory, Provenance,
};
use crate::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    #[default]
    Kriging,
    NeuralNet,
    NeighborMajority,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Kriging => "kriging",
            Engine::NeuralNet => "neural-net",
            Engine::NeighborMajority => "neighbor-majority",
        })
    }
}

impl std::str::FromStr for Engine {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kriging" => Ok(Engine::Kriging),
            "neural-net" | "nn" => Ok(Engine::NeuralNet),
            "neighbor-majority" | "majority" => Ok(Engine::NeighborMajority),
            other => Err(format!("unknown engine `{other}`")),
        }
    }
}

impl Engine {
    fn method(self) -> ImputeMethod {
        match self {
            Engine::Kriging => ImputeMethod::Kriging,
            Engine::NeuralNet => ImputeMethod::NeuralNet,
            Engine::NeighborMajority => ImputeMethod::NeighborMajority,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpSettings {
    /// Hidden layer widths; input and output widths are implied.
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for MlpSettings {
    fn default() -> Self {
        Self {
            layers: vec![32, 16],
            activation: Activation::Relu,
            lr: 0.01,
            epochs: 150,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl MlpSettings {
    fn train_config(&self, seed_offset: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed.wrapping_add(seed_offset),
            momentum: self.momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeConfig {
    /// Neighbors used per prediction.
    pub k: usize,
    pub family: VariogramFamily,
    /// Minimum number of geocoded records with a known value.
    pub min_known: usize,
    pub n_bins: usize,
    /// Largest lag in the empirical variogram; defaults to half the diagonal
    /// of the known samples' extent.
    pub max_lag: Option<f64>,
    /// Variogram estimation uses a seeded subsample above this size.
    pub max_variogram_samples: usize,
    /// Folds used for the neural regressor's residual-based interval.
    pub residual_folds: usize,
    /// Numeric predictions are clipped to the range of the known values,
    /// e.g. to keep probabilities in [0, 1].
    pub clamp_to_observed: bool,
    pub seed: u64,
    pub mlp: MlpSettings,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            family: VariogramFamily::Exponential,
            min_known: 10,
            n_bins: 15,
            max_lag: None,
            max_variogram_samples: 2000,
            residual_folds: 5,
            clamp_to_observed: false,
            seed: 0,
            mlp: MlpSettings::default(),
        }
    }
}

/// Result of [`impute`].
#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    pub inventory: Inventory,
    /// Ids that received an imputed value, in inventory order.
    pub imputed: Vec<String>,
    /// Fitted variogram for the kriging engine.
    pub variogram: Option<VariogramFit>,
}

struct Known {
    samples: Vec<SpatialSample>,
    labels: Vec<String>,
    unit: Option<String>,
}

fn collect_known(inv: &Inventory, attribute: &str, kind: AttributeKind) -> Known {
    let mut labels: Vec<String> = Vec::new();
    if kind == AttributeKind::Categorical {
        let mut set: Vec<String> = inv
            .records()
            .iter()
            .filter(|r| r.geocode.is_some())
            .filter_map(|r| r.get(attribute))
            .filter(|a| a.provenance.is_observed())
            .filter_map(|a| a.value.as_label().map(str::to_string))
            .collect();
        set.sort();
        set.dedup();
        labels = set;
    }
    let mut unit = None;
    let mut samples = Vec::new();
    for r in inv.records() {
        let (Some(g), Some(a)) = (r.geocode, r.get(attribute)) else { continue };
        if !a.provenance.is_observed() {
            continue;
        }
        let value = match &a.value {
            AttributeValue::Numeric { value, unit: u } => {
                if unit.is_none() {
                    unit.clone_from(u);
                }
                *value
            }
            AttributeValue::Categorical { label } => labels.binary_search(label).expect("label collected") as f64,
        };
        samples.push(SpatialSample { location: g, value });
    }
    Known { samples, labels, unit }
}

fn targets(inv: &Inventory, attribute: &str) -> Vec<(usize, Geocode)> {
    inv.records()
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.attributes.contains_key(attribute))
        .filter_map(|(i, r)| r.geocode.map(|g| (i, g)))
        .collect()
}

/// Half the diagonal of the samples' bounding box, in meters.
pub fn default_max_lag(samples: &[SpatialSample]) -> f64 {
    let (mut lo_lat, mut hi_lat, mut lo_lon, mut hi_lon) = (90.0f64, -90.0f64, 180.0f64, -180.0f64);
    for s in samples {
        lo_lat = lo_lat.min(s.location.lat());
        hi_lat = hi_lat.max(s.location.lat());
        lo_lon = lo_lon.min(s.location.lon());
        hi_lon = hi_lon.max(s.location.lon());
    }
    let (Ok(a), Ok(b)) = (Geocode::new(lo_lat, lo_lon), Geocode::new(hi_lat, hi_lon)) else {
        return 1.0;
    };
    let d = haversine_distance(a, b) / 2.0;
    if d > 0.0 {
        d
    } else {
        1.0
    }
}

/// Variogram fit used by the kriging engine: empirical variogram on a seeded
/// subsample of at most `max_variogram_samples`, then weighted least squares.
pub fn fit_engine_variogram(samples: &[SpatialSample], cfg: &ImputeConfig) -> Result<VariogramFit, SurfError> {
    let subset: Vec<SpatialSample> = if samples.len() > cfg.max_variogram_samples {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        idx.truncate(cfg.max_variogram_samples);
        idx.sort_unstable();
        idx.into_iter().map(|i| samples[i]).collect()
    } else {
        samples.to_vec()
    };
    let max_lag = cfg.max_lag.unwrap_or_else(|| default_max_lag(&subset));
    let emp = empirical_variogram(&subset, cfg.n_bins, max_lag)?;
    fit_variogram(&emp, cfg.family)
}

/// Fills `attribute` on every geocoded record that lacks it. Known values
/// are never overwritten and records without a geocode are left untouched.
pub fn impute(inv: &Inventory, attribute: &str, engine: Engine, cfg: &ImputeConfig) -> Result<Imputation, SurfError> {
    let kind = inv.kind_of(attribute)?;
    let compatible = match engine {
        Engine::Kriging => kind == AttributeKind::Numeric,
        Engine::NeighborMajority => kind == AttributeKind::Categorical,
        Engine::NeuralNet => true,
    };
    if !compatible {
        return Err(SurfError::EngineMismatch {
            engine,
            kind,
            attribute: attribute.to_string(),
        });
    }
    if cfg.k == 0 {
        return Err(SurfError::InvalidParameter("k must be at least 1".into()));
    }
    let todo = targets(inv, attribute);
    if todo.is_empty() {
        return Ok(Imputation {
            inventory: inv.clone(),
            imputed: Vec::new(),
            variogram: None,
        });
    }
    let known = collect_known(inv, attribute, kind);
    let required = cfg.min_known.max(1);
    if known.samples.len() < required {
        return Err(SurfError::InsufficientData {
            attribute: attribute.to_string(),
            known: known.samples.len(),
            required,
        });
    }

    let mut variogram = None;
    let index = NeighborIndex::new(known.samples.clone());
    let sites: Vec<Geocode> = todo.iter().map(|(_, g)| *g).collect();
    let predictions: Vec<(AttributeValue, f64)> = match (engine, kind) {
        (Engine::Kriging, _) => {
            let fit = fit_engine_variogram(&known.samples, cfg)?;
            variogram = Some(fit);
            let results = par_map(&sites, |&g| {
                let ctx = index.query(g, cfg.k)?;
                krige(&fit.model, &ctx)
            });
            results
                .into_iter()
                .map(|r| {
                    let p = r?;
                    Ok((AttributeValue::numeric_with_unit(p.mean, known.unit.clone())?, p.std_dev()))
                })
                .collect::<Result<_, SurfError>>()?
        }
        (Engine::NeighborMajority, _) => par_map(&sites, |&g| {
            let ctx = index.query(g, cfg.k)?;
            let (label, share) = majority(ctx.values());
            Ok((AttributeValue::categorical(known.labels[label].clone())?, 1.0 - share))
        })
        .into_iter()
        .collect::<Result<_, SurfError>>()?,
        (Engine::NeuralNet, AttributeKind::Numeric) => {
            let net = NeuralRegressor::fit(&index, cfg)?;
            let half_width = net.residual_half_width(&index, cfg)?;
            par_map(&sites, |&g| net.predict(&index, g, cfg.k))
                .into_iter()
                .map(|r| Ok((AttributeValue::numeric_with_unit(r?, known.unit.clone())?, half_width)))
                .collect::<Result<_, SurfError>>()?
        }
        (Engine::NeuralNet, AttributeKind::Categorical) => {
            let n_classes = known.labels.len();
            if n_classes < 2 {
                let label = AttributeValue::categorical(known.labels[0].clone())?;
                sites.iter().map(|_| (label.clone(), 0.0)).collect()
            } else {
                let net = neural_classifier(&index, n_classes, cfg)?;
                par_map(&sites, |&g| {
                    let ctx = index.query(g, cfg.k)?;
                    let x = build_with(&ctx, cfg.k, |v| class_code(v, n_classes));
                    net.predict(&x)
                })
                .into_iter()
                .map(|r| {
                    let p = r?;
                    let c = argmax(&p);
                    Ok((AttributeValue::categorical(known.labels[c].clone())?, 1.0 - p[c]))
                })
                .collect::<Result<_, SurfError>>()?
            }
        }
    };

    let predictions = if cfg.clamp_to_observed && kind == AttributeKind::Numeric {
        let (lo, hi) = known
            .samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.value), hi.max(s.value)));
        predictions
            .into_iter()
            .map(|(v, u)| match v {
                AttributeValue::Numeric { value, unit } => (AttributeValue::Numeric { value: value.clamp(lo, hi), unit }, u),
                other => (other, u),
            })
            .collect()
    } else {
        predictions
    };

    let (schema, mut records) = inv.clone().into_parts();
    let method = engine.method();
    let mut imputed = Vec::with_capacity(todo.len());
    for ((i, _), (value, uncertainty)) in todo.iter().zip(predictions) {
        let rec: &mut BuildingRecord = &mut records[*i];
        rec.attributes.insert(
            attribute.to_string(),
            Attribute {
                value,
                provenance: Provenance::imputed(method, uncertainty)?,
            },
        );
        imputed.push(rec.id.clone());
    }
    log::info!("imputed {} value(s) of `{attribute}` with {engine}", imputed.len());
    Ok(Imputation {
        inventory: Inventory::new(schema, records)?,
        imputed,
        variogram,
    })
}

/// Most frequent class code among the neighbors and its share. Ties go to the
/// class seen first, i.e. the one with the nearest representative.
fn majority(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut total = 0;
    for (order, v) in values.enumerate() {
        let e = counts.entry(v as usize).or_insert((0, order));
        e.0 += 1;
        total += 1;
    }
    let (&label, &(count, _)) = counts
        .iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .expect("at least one neighbor");
    (label, count as f64 / total as f64)
}

fn class_code(v: f64, n_classes: usize) -> f64 {
    v / (n_classes.max(2) - 1) as f64
}

fn arch(cfg: &ImputeConfig, outputs: usize) -> Vec<usize> {
    let mut a = vec![feature_len(cfg.k)];
    a.extend(&cfg.mlp.layers);
    a.push(outputs);
    a
}

/// Training set from the known samples: each sample is a target and its
/// neighbors exclude itself.
fn training_features(index: &NeighborIndex, k: usize, f: impl Fn(f64) -> f64 + Sync) -> Result<Vec<Vec<f64>>, SurfError> {
    let idx: Vec<usize> = (0..index.len()).collect();
    par_map(&idx, |&i| {
        let ctx = index.query_excluding(index.samples()[i].location, k, Some(i))?;
        Ok(build_with(&ctx, k, &f))
    })
    .into_iter()
    .collect()
}

fn neural_classifier(index: &NeighborIndex, n_classes: usize, cfg: &ImputeConfig) -> Result<MlpModel, SurfError> {
    if index.len() < 2 {
        return Err(SurfError::NoSamples);
    }
    let x = training_features(index, cfg.k, |v| class_code(v, n_classes))?;
    let y = Targets::Classes(index.samples().iter().map(|s| s.value as usize).collect());
    let data = Dataset::new(x, y)?;
    let model = MlpModel::new(&arch(cfg, n_classes), cfg.mlp.activation, OutputKind::Softmax, cfg.mlp.seed)?;
    Ok(train_layers(model, &data, &cfg.mlp.train_config(0), 0, Stage::Full)?.model)
}

struct NeuralRegressor {
    model: MlpModel,
    mean: f64,
    scale: f64,
    data: Dataset,
}

impl NeuralRegressor {
    fn fit(index: &NeighborIndex, cfg: &ImputeConfig) -> Result<Self, SurfError> {
        if index.len() < 2 {
            return Err(SurfError::NoSamples);
        }
        let values: Vec<f64> = index.samples().iter().map(|s| s.value).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if sd > 0.0 { sd } else { 1.0 };
        let x = training_features(index, cfg.k, |v| (v - mean) / scale)?;
        let y = Targets::Values(values.iter().map(|v| vec![(v - mean) / scale]).collect());
        let data = Dataset::new(x, y)?;
        let init = MlpModel::new(&arch(cfg, 1), cfg.mlp.activation, OutputKind::Identity, cfg.mlp.seed)?;
        let model = train_layers(init, &data, &cfg.mlp.train_config(0), 0, Stage::Full)?.model;
        Ok(Self {
            model,
            mean,
            scale,
            data,
        })
    }

    fn predict(&self, index: &NeighborIndex, g: Geocode, k: usize) -> Result<f64, SurfError> {
        let ctx = index.query(g, k)?;
        let x = build_with(&ctx, k, |v| (v - self.mean) / self.scale);
        Ok(self.model.predict(&x)?[0] * self.scale + self.mean)
    }

    /// 95th percentile of absolute k-fold hold-out residuals.
    fn residual_half_width(&self, index: &NeighborIndex, cfg: &ImputeConfig) -> Result<f64, SurfError> {
        let n = self.data.len();
        let folds = cfg.residual_folds.min(n);
        if folds < 2 {
            return Ok(0.0);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf01d));
        let mut fold_of = vec![0; n];
        for (p, &i) in order.iter().enumerate() {
            fold_of[i] = p % folds;
        }
        let mut residuals = Vec::with_capacity(n);
        for fold in 0..folds {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] == fold);
            let init = MlpModel::new(&arch(cfg, 1), cfg.mlp.activation, OutputKind::Identity, cfg.mlp.seed)?;
            let model = train_layers(init, &self.data.subset(&train), &cfg.mlp.train_config(fold as u64 + 1), 0, Stage::Full)?
                .model;
            for i in test {
                let pred = model.predict(&self.data.features[i])?[0] * self.scale + self.mean;
                residuals.push((pred - index.samples()[i].value).abs());
            }
        }
        residuals.sort_by(f64::total_cmp);
        let rank = ((0.95 * residuals.len() as f64).ceil() as usize).clamp(1, residuals.len());
        Ok(residuals[rank - 1])
    }
}

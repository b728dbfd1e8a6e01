//! Browser bindings. Every export takes plain numbers or strings and returns
//! a JSON document; the `*_json` functions hold the logic so they can be
//! tested natively.

use bimkit::raster::{probability_surface, SurfaceConfig, SurfaceEngine, NODATA};
use bimkit::selftrain::{self_train_loop, SelfTrainConfig};
use bimkit::surf::impute::{default_max_lag, fit_engine_variogram};
use bimkit::surf::{empirical_variogram, ImputeConfig, SpatialSample, VariogramFamily};
use bimkit::synth::{generate_city, smooth_field_samples, CityConfig};
use bimkit::{AttributeKind, AttributeValue, BuildingRecord, Inventory, Provenance, Schema};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const SIDE_KM: f64 = 3.0;

fn samples(n: usize, length_scale_km: f64, seed: u64) -> Vec<SpatialSample> {
    smooth_field_samples(n, SIDE_KM, length_scale_km, seed)
        .into_iter()
        .map(|(g, v)| SpatialSample::new(g, v).expect("finite field value"))
        .collect()
}

/// Empirical variogram of a smooth synthetic field, the fitted model and
/// the model curve sampled over the lag range.
pub fn variogram_json(n: usize, length_scale_km: f64, family: &str, seed: u64) -> Result<Value, String> {
    let family: VariogramFamily = family.parse().map_err(|e: String| e)?;
    let s = samples(n.clamp(10, 2000), length_scale_km, seed);
    let cfg = ImputeConfig {
        family,
        ..ImputeConfig::default()
    };
    let max_lag = default_max_lag(&s);
    let emp = empirical_variogram(&s, cfg.n_bins, max_lag).map_err(|e| e.to_string())?;
    let fit = fit_engine_variogram(&s, &cfg).map_err(|e| e.to_string())?;
    let curve: Vec<[f64; 2]> = (0..=100)
        .map(|i| {
            let h = max_lag * i as f64 / 100.0;
            [h, fit.model.gamma(h)]
        })
        .collect();
    Ok(json!({
        "points": s.iter().map(|p| [p.location.lon(), p.location.lat(), p.value]).collect::<Vec<_>>(),
        "bins": emp.bins,
        "model": fit.model,
        "curve": curve,
    }))
}

/// Soft-story probability surface from scattered building probabilities.
/// Probabilities are a logistic squash of a smooth field.
pub fn surface_json(n: usize, engine: &str, cell_size: f64, seed: u64) -> Result<Value, String> {
    let engine: SurfaceEngine = engine.parse()?;
    let schema: Schema = [("soft_story_prob".to_string(), AttributeKind::Numeric)].into_iter().collect();
    let records: Vec<BuildingRecord> = smooth_field_samples(n.clamp(10, 5000), SIDE_KM, 0.6, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (g, v))| {
            let p = 1.0 / (1.0 + (-2.0 * v).exp());
            BuildingRecord::new(format!("b{i}")).with_geocode(g).with_attribute(
                "soft_story_prob",
                AttributeValue::numeric(p).expect("finite"),
                Provenance::Metadata,
            )
        })
        .collect();
    let inv = Inventory::new(schema, records).map_err(|e| e.to_string())?;
    let cfg = SurfaceConfig {
        engine,
        cell_size,
        ..SurfaceConfig::default()
    };
    let surface = probability_surface(&inv, "soft_story_prob", &cfg).map_err(|e| e.to_string())?;
    let g = &surface.grid;
    let values: Vec<Option<f64>> = g.values().iter().map(|&v| (v != NODATA).then_some(v)).collect();
    Ok(json!({
        "ncols": g.ncols,
        "nrows": g.nrows,
        "xllcorner": g.xllcorner,
        "yllcorner": g.yllcorner,
        "cell_size": g.cell_size,
        "values": values,
        "cutoff_m": surface.cutoff,
        "variogram": surface.variogram,
        "points": inv.records().iter().map(|r| {
            let g = r.geocode.expect("geocoded");
            [g.lon(), g.lat(), r.get("soft_story_prob").and_then(|a| a.value.as_f64()).unwrap_or(f64::NAN)]
        }).collect::<Vec<_>>(),
    }))
}

/// Self-training on a synthetic city: per-round labeled set size and
/// held-out metrics.
pub fn selftrain_json(n: usize, tau: f64, rounds: usize, seed: u64) -> Result<Value, String> {
    let city = generate_city(&CityConfig {
        n_buildings: n.clamp(100, 5000),
        seed,
        ..CityConfig::default()
    });
    let split = city.selftrain_split(seed);
    let cfg = SelfTrainConfig {
        tau,
        max_rounds: rounds,
        ..SelfTrainConfig::default()
    };
    let out = self_train_loop(&split.seed, &split.pool, &cfg, Some(&split.test)).map_err(|e| e.to_string())?;
    Ok(json!({
        "seed_labeled": split.seed.len(),
        "pool": split.pool.len(),
        "test": split.test.len(),
        "rounds": out.rounds,
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn variogram(n: u32, length_scale_km: f64, family: &str, seed: u32) -> Result<String, JsValue> {
    to_js(variogram_json(n as usize, length_scale_km, family, seed as u64))
}

#[wasm_bindgen]
pub fn surface(n: u32, engine: &str, cell_size: f64, seed: u32) -> Result<String, JsValue> {
    to_js(surface_json(n as usize, engine, cell_size, seed as u64))
}

#[wasm_bindgen]
pub fn selftrain(n: u32, tau: f64, rounds: u32, seed: u32) -> Result<String, JsValue> {
    to_js(selftrain_json(n as usize, tau, rounds as usize, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variogram_curve_passes_through_origin() {
        let v = variogram_json(200, 0.8, "exponential", 1).unwrap();
        assert_eq!(v["curve"][0][1], 0.0);
        assert_eq!(v["points"].as_array().unwrap().len(), 200);
        assert!(variogram_json(200, 0.8, "cubic", 1).is_err());
    }

    #[test]
    fn surface_values_are_probabilities_or_null() {
        for engine in ["idw", "kriging"] {
            let v = surface_json(300, engine, 0.002, 2).unwrap();
            let cells = v["values"].as_array().unwrap();
            assert_eq!(cells.len(), (v["ncols"].as_u64().unwrap() * v["nrows"].as_u64().unwrap()) as usize);
            assert!(cells.iter().filter_map(Value::as_f64).all(|p| (0.0..=1.0).contains(&p)));
            assert!(cells.iter().any(|c| c.is_number()));
        }
    }

    #[test]
    fn selftrain_reports_each_round() {
        let v = selftrain_json(400, 0.9, 2, 3).unwrap();
        let rounds = v["rounds"].as_array().unwrap();
        assert!(!rounds.is_empty() && rounds.len() <= 2);
        assert!(rounds[0]["eval"]["accuracy"].as_f64().unwrap() > 0.5);
        assert!(selftrain_json(400, 0.4, 2, 3).is_err());
    }
}

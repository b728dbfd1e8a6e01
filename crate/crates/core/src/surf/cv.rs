//! k-fold cross-validation of the imputation engines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::impute::{impute, Engine, ImputeConfig};
use super::SurfError;
use crate::bim::{AttributeKind, AttributeValue, Inventory};
use crate::selftrain::metrics;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CvMetrics {
    Regression {
        rmse: f64,
        mae: f64,
    },
    /// Precision, recall and F1 are macro-averaged over classes.
    Classification {
        accuracy: f64,
        precision: f64,
        recall: f64,
        f1: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub engine: Engine,
    pub attribute: String,
    pub metrics: CvMetrics,
    pub folds: usize,
    pub seed: u64,
    /// Number of held-out predictions.
    pub n: usize,
}

/// Ids of geocoded records with an observed value, in inventory order.
fn known_ids(inv: &Inventory, attribute: &str) -> Vec<usize> {
    inv.records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.geocode.is_some() && r.get(attribute).is_some_and(|a| a.provenance.is_observed()))
        .map(|(i, _)| i)
        .collect()
}

/// Assigns each known record to a fold: a seeded shuffle, then round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n];
    for (p, &i) in order.iter().enumerate() {
        fold_of[i] = p % folds;
    }
    fold_of
}

/// Hides one fold at a time, imputes it from the rest and scores the
/// predictions against the hidden values.
pub fn cross_validate(
    inv: &Inventory,
    attribute: &str,
    engine: Engine,
    cfg: &ImputeConfig,
    folds: usize,
    seed: u64,
) -> Result<CvReport, SurfError> {
    let kind = inv.kind_of(attribute)?;
    if folds < 2 {
        return Err(SurfError::InvalidParameter("folds must be at least 2".into()));
    }
    let known = known_ids(inv, attribute);
    let fold_of = fold_assignment(known.len(), folds, seed);
    if let Some(empty) = (0..folds).find(|f| !fold_of.contains(f)) {
        return Err(SurfError::EmptyFold { fold: empty });
    }

    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for fold in 0..folds {
        let held: Vec<usize> = known.iter().zip(&fold_of).filter(|(_, &f)| f == fold).map(|(&i, _)| i).collect();
        let (schema, mut records) = inv.clone().into_parts();
        for &i in &held {
            records[i].attributes.remove(attribute);
        }
        let masked = Inventory::new(schema, records)?;
        let out = impute(&masked, attribute, engine, cfg)?;
        for &i in &held {
            truth.push(inv.records()[i].attributes[attribute].value.clone());
            predicted.push(out.inventory.records()[i].attributes[attribute].value.clone());
        }
    }

    let metrics = match kind {
        AttributeKind::Numeric => {
            let errs: Vec<f64> = truth
                .iter()
                .zip(&predicted)
                .map(|(t, p)| p.as_f64().unwrap_or(f64::NAN) - t.as_f64().unwrap_or(f64::NAN))
                .collect();
            let n = errs.len() as f64;
            CvMetrics::Regression {
                rmse: (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
                mae: errs.iter().map(|e| e.abs()).sum::<f64>() / n,
            }
        }
        AttributeKind::Categorical => classification_metrics(&truth, &predicted),
    };
    Ok(CvReport {
        engine,
        attribute: attribute.to_string(),
        metrics,
        folds,
        seed,
        n: truth.len(),
    })
}

fn classification_metrics(truth: &[AttributeValue], predicted: &[AttributeValue]) -> CvMetrics {
    let mut labels: Vec<&str> = truth.iter().chain(predicted).filter_map(AttributeValue::as_label).collect();
    labels.sort_unstable();
    labels.dedup();
    let code = |v: &AttributeValue| labels.binary_search(&v.as_label().unwrap_or("")).unwrap_or(0);
    let t: Vec<usize> = truth.iter().map(code).collect();
    let p: Vec<usize> = predicted.iter().map(code).collect();
    let per_class: Vec<_> = (0..labels.len())
        .map(|c| metrics(&p, &t, c).expect("equal, non-empty lengths"))
        .collect();
    let k = per_class.len() as f64;
    CvMetrics::Classification {
        accuracy: t.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / t.len() as f64,
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bim::{BuildingRecord, Geocode, Provenance, Schema};

    fn field(n_side: usize, f: impl Fn(f64, f64) -> f64) -> Inventory {
        let schema: Schema = [("v".to_string(), AttributeKind::Numeric)].into_iter().collect();
        let recs = (0..n_side * n_side)
            .map(|p| {
                let (i, j) = ((p / n_side) as f64, (p % n_side) as f64);
                BuildingRecord::new(format!("r{p}"))
                    .with_geocode(Geocode::new(37.8 + i * 4e-4, -122.27 + j * 5e-4).unwrap())
                    .with_attribute("v", AttributeValue::numeric(f(i, j)).unwrap(), Provenance::Metadata)
            })
            .collect();
        Inventory::new(schema, recs).unwrap()
    }

    #[test]
    fn constant_field_has_zero_rmse() {
        let inv = field(6, |_, _| 2.0);
        let rep = cross_validate(&inv, "v", Engine::Kriging, &ImputeConfig::default(), 4, 1).unwrap();
        let CvMetrics::Regression { rmse, mae } = rep.metrics else { panic!() };
        assert!(rmse < 1e-9 && mae < 1e-9);
        assert_eq!(rep.n, 36);
    }

    #[test]
    fn empty_fold_and_bad_fold_count() {
        let inv = field(3, |i, j| i + j);
        assert!(matches!(
            cross_validate(&inv, "v", Engine::Kriging, &ImputeConfig { min_known: 2, ..Default::default() }, 10, 0),
            Err(SurfError::EmptyFold { .. })
        ));
        assert!(cross_validate(&inv, "v", Engine::Kriging, &ImputeConfig::default(), 1, 0).is_err());
    }

    #[test]
    fn deterministic_folds() {
        assert_eq!(fold_assignment(50, 5, 9), fold_assignment(50, 5, 9));
        let f = fold_assignment(50, 5, 9);
        for k in 0..5 {
            assert_eq!(f.iter().filter(|&&x| x == k).count(), 10);
        }
    }
}

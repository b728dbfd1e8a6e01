//! Reproducible synthetic city.
//!
//! Buildings are scattered uniformly over a square around downtown Oakland.
//! Attributes are driven by smooth Gaussian random fields, approximated with
//! random Fourier features, so nearby buildings resemble each other. The
//! soft-story class follows a latent spatial propensity, which makes the
//! class spatially clustered.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bim::{AttributeKind, Geocode};
use crate::ingest::{AttributeColumn, CsvSchemaSpec};
use crate::selftrain::{LabeledItem, LabeledSet, Origin, UnlabeledItem, UnlabeledPool};
use crate::surf::geo::local_offset_km;

/// Downtown Oakland.
pub const CENTER: (f64, f64) = (37.8044, -122.2712);
/// Street-view image count for Oakland.
pub const OAKLAND_BUILDINGS: usize = 1359;

const STREETS: [&str; 12] = [
    "Broadway", "Telegraph Ave", "Grand Ave", "Harrison St", "Webster St", "Franklin St", "Alice St", "Jackson St",
    "Madison St", "Oak St", "Market St", "Adeline St",
];

/// Stationary Gaussian random field with squared-exponential covariance,
/// unit variance and the given length scale, built from `m` random cosines.
#[derive(Debug, Clone)]
pub struct SmoothField {
    omegas: Vec<[f64; 2]>,
    phases: Vec<f64>,
}

impl SmoothField {
    pub fn new(length_scale_km: f64, m: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / length_scale_km).expect("positive scale");
        Self {
            omegas: (0..m).map(|_| [normal.sample(rng), normal.sample(rng)]).collect(),
            phases: (0..m).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
        }
    }

    pub fn value(&self, x_km: f64, y_km: f64) -> f64 {
        let s: f64 = self
            .omegas
            .iter()
            .zip(&self.phases)
            .map(|(w, b)| (w[0] * x_km + w[1] * y_km + b).cos())
            .sum();
        s * (2.0 / self.omegas.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CityConfig {
    pub n_buildings: usize,
    pub seed: u64,
    /// Side of the square study area; `None` scales it with the building count.
    pub side_km: Option<f64>,
    pub length_scale_km: f64,
    pub missing_geocode_rate: f64,
    /// Share of geocode-less buildings whose address is absent from the table.
    pub unresolvable_rate: f64,
    pub missing_attribute_rate: f64,
    pub vision_coverage: f64,
    /// Share of buildings in the expert-labeled and test splits.
    pub labeled_fraction: f64,
    pub test_fraction: f64,
    pub feature_noise: f64,
}

impl Default for CityConfig {
    fn default() -> Self {
        Self {
            n_buildings: OAKLAND_BUILDINGS,
            seed: 7,
            side_km: None,
            length_scale_km: 0.8,
            missing_geocode_rate: 0.15,
            unresolvable_rate: 0.1,
            missing_attribute_rate: 0.3,
            vision_coverage: 0.6,
            labeled_fraction: 0.1,
            test_fraction: 0.3,
            feature_noise: 1.0,
        }
    }
}

impl CityConfig {
    pub fn side(&self) -> f64 {
        self.side_km
            .unwrap_or_else(|| 5.0 * (self.n_buildings as f64 / OAKLAND_BUILDINGS as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBuilding {
    pub id: String,
    pub address: String,
    pub geocode: Geocode,
    pub stories: f64,
    pub year_built: f64,
    pub occupancy: String,
    /// Latent soft-story propensity.
    pub soft_story_propensity: f64,
    pub soft_story: bool,
    /// Simulated vision-model probability, noisy around the true class.
    pub vision_probability: f64,
    /// Image-derived features for the soft-story classifier.
    pub features: Vec<f64>,
    /// Which metadata columns are withheld.
    pub hide_geocode: bool,
    pub unresolvable: bool,
    pub hide_stories: bool,
    pub hide_year: bool,
    pub hide_occupancy: bool,
    pub in_vision: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCity {
    pub config: CityConfig,
    pub buildings: Vec<SyntheticBuilding>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub const FEATURE_DIM: usize = 6;

pub fn generate_city(cfg: &CityConfig) -> SyntheticCity {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ls = cfg.length_scale_km;
    let f_stories = SmoothField::new(ls, 200, &mut rng);
    let f_year = SmoothField::new(ls * 1.5, 200, &mut rng);
    let f_occ = SmoothField::new(ls, 200, &mut rng);
    let f_soft = SmoothField::new(ls, 200, &mut rng);
    let side = cfg.side();
    let km_lat = 1.0 / 111.195;
    let km_lon = km_lat / CENTER.0.to_radians().cos();
    let noise = Normal::new(0.0, cfg.feature_noise.max(1e-12)).expect("finite noise");

    let buildings = (0..cfg.n_buildings)
        .map(|i| {
            let x = rng.random_range(-side / 2.0..side / 2.0);
            let y = rng.random_range(-side / 2.0..side / 2.0);
            let lat = ((CENTER.0 + y * km_lat) * 1e6).round() / 1e6;
            let lon = ((CENTER.1 + x * km_lon) * 1e6).round() / 1e6;
            let geocode = Geocode::new(lat, lon).expect("inside valid range");
            let stories = (2.5 + 1.2 * f_stories.value(x, y)).round().clamp(1.0, 8.0);
            let year_built = (1900.0 + 90.0 * sigmoid(1.5 * f_year.value(x, y))).round();
            let o = f_occ.value(x, y);
            let occupancy = if o < -0.4 {
                "commercial"
            } else if o < 0.6 {
                "residential"
            } else {
                "mixed"
            };
            let logit = 1.6 * f_soft.value(x, y) + 0.4 * (stories - 2.5) - 0.3;
            let propensity = sigmoid(logit);
            let soft_story = rng.random::<f64>() < propensity;
            let sign = if soft_story { 1.0 } else { -1.0 };
            let vision_probability = (sigmoid(2.0 * sign + 0.8 * rng.sample::<f64, _>(StandardNormal)) * 1e4).round() / 1e4;
            let mut features = vec![x / side * 2.0, y / side * 2.0];
            features.extend((0..FEATURE_DIM - 2).map(|_| 0.5 * sign + noise.sample(&mut rng)));
            let hide_geocode = rng.random::<f64>() < cfg.missing_geocode_rate;
            let unresolvable = hide_geocode && rng.random::<f64>() < cfg.unresolvable_rate;
            let street = STREETS[i % STREETS.len()];
            let suffix = if unresolvable { " Unit B" } else { "" };
            SyntheticBuilding {
                id: format!("B{i:06}"),
                address: format!("{} {street}{suffix}, Oakland, CA", 100 + 2 * i),
                geocode,
                stories,
                year_built,
                occupancy: occupancy.to_string(),
                soft_story_propensity: propensity,
                soft_story,
                vision_probability,
                features,
                hide_geocode,
                unresolvable,
                hide_stories: rng.random::<f64>() < cfg.missing_attribute_rate,
                hide_year: rng.random::<f64>() < cfg.missing_attribute_rate,
                hide_occupancy: rng.random::<f64>() < cfg.missing_attribute_rate * 0.5,
                in_vision: rng.random::<f64>() < cfg.vision_coverage,
            }
        })
        .collect();
    SyntheticCity {
        config: cfg.clone(),
        buildings,
    }
}

/// Column layout of the generated metadata CSV.
pub fn metadata_spec() -> CsvSchemaSpec {
    let mut spec = CsvSchemaSpec::new(
        "id",
        vec![
            AttributeColumn {
                unit: Some("stories".into()),
                ..AttributeColumn::new("stories", AttributeKind::Numeric)
            },
            AttributeColumn::new("year_built", AttributeKind::Numeric),
            AttributeColumn::new("occupancy", AttributeKind::Categorical),
        ],
    );
    spec.address_column = Some("address".into());
    spec.lat_column = Some("lat".into());
    spec.lon_column = Some("lon".into());
    spec
}

/// Column layout of the generated vision CSV.
pub fn vision_spec() -> CsvSchemaSpec {
    let mut spec = CsvSchemaSpec::new("id", vec![AttributeColumn::new("soft_story_prob", AttributeKind::Numeric)]);
    spec.lat_column = Some("lat".into());
    spec.lon_column = Some("lon".into());
    spec.confidence_column = Some("confidence".into());
    spec
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

impl SyntheticCity {
    pub fn write_metadata_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "address", "lat", "lon", "stories", "year_built", "occupancy"])?;
        for b in &self.buildings {
            let (lat, lon) = if b.hide_geocode {
                (String::new(), String::new())
            } else {
                (fmt6(b.geocode.lat()), fmt6(b.geocode.lon()))
            };
            let hide = |h: bool, s: String| if h { String::new() } else { s };
            out.write_record([
                b.id.clone(),
                b.address.clone(),
                lat,
                lon,
                hide(b.hide_stories, b.stories.to_string()),
                hide(b.hide_year, b.year_built.to_string()),
                hide(b.hide_occupancy, b.occupancy.clone()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Vision predictions for the covered buildings: probability of the
    /// soft-story class and the model's confidence in its top class.
    pub fn write_vision_csv(&self, w: impl Write) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "lat", "lon", "soft_story_prob", "confidence"])?;
        for b in self.buildings.iter().filter(|b| b.in_vision) {
            let p = b.vision_probability;
            out.write_record([
                b.id.clone(),
                fmt6(b.geocode.lat()),
                fmt6(b.geocode.lon()),
                p.to_string(),
                format!("{:.4}", p.max(1.0 - p)),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Address table for the offline geocoder; unresolvable addresses are
    /// left out on purpose.
    pub fn write_geocode_table(&self, w: impl Write) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["address", "lat", "lon", "quality"])?;
        for b in self.buildings.iter().filter(|b| !b.unresolvable) {
            out.write_record([b.address.clone(), fmt6(b.geocode.lat()), fmt6(b.geocode.lon()), "exact".into()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Seeded split into an expert-labeled seed set, an unlabeled pool and a
    /// held-out test set.
    pub fn selftrain_split(&self, seed: u64) -> SelfTrainSplit {
        let mut idx: Vec<usize> = (0..self.buildings.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = idx.len();
        let n_test = (n as f64 * self.config.test_fraction).round() as usize;
        let n_seed = (n as f64 * self.config.labeled_fraction).round() as usize;
        let labeled = |i: usize| {
            let b = &self.buildings[i];
            LabeledItem {
                id: b.id.clone(),
                features: b.features.clone(),
                label: usize::from(b.soft_story),
                origin: Origin::Expert,
            }
        };
        let test = idx[..n_test].iter().map(|&i| labeled(i)).collect();
        let seed_items = idx[n_test..n_test + n_seed].iter().map(|&i| labeled(i)).collect();
        let pool = idx[n_test + n_seed..]
            .iter()
            .map(|&i| UnlabeledItem {
                id: self.buildings[i].id.clone(),
                features: self.buildings[i].features.clone(),
            })
            .collect();
        SelfTrainSplit {
            seed: LabeledSet::new(seed_items).expect("uniform features"),
            pool: UnlabeledPool::new(pool).expect("uniform features"),
            test: LabeledSet::new(test).expect("uniform features"),
        }
    }

    /// Writes every input file of the pipeline into `dir` and returns the
    /// paths written.
    pub fn write_all(&self, dir: impl AsRef<Path>) -> std::io::Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut emit = |name: &str, f: &dyn Fn(std::fs::File) -> csv::Result<()>| -> std::io::Result<()> {
            let path = dir.join(name);
            f(std::fs::File::create(&path)?).map_err(std::io::Error::other)?;
            written.push(path);
            Ok(())
        };
        emit("metadata.csv", &|f| self.write_metadata_csv(f))?;
        emit("vision.csv", &|f| self.write_vision_csv(f))?;
        emit("geocode_table.csv", &|f| self.write_geocode_table(f))?;
        let split = self.selftrain_split(self.config.seed);
        emit("labeled.csv", &|f| write_features(f, split.seed.items().iter().map(|i| (&i.id, &i.features, Some(i.label)))))?;
        emit("unlabeled.csv", &|f| write_features(f, split.pool.items().iter().map(|i| (&i.id, &i.features, None))))?;
        emit("test.csv", &|f| write_features(f, split.test.items().iter().map(|i| (&i.id, &i.features, Some(i.label)))))?;
        Ok(written)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainSplit {
    pub seed: LabeledSet,
    pub pool: UnlabeledPool,
    pub test: LabeledSet,
}

fn write_features<'a>(
    w: impl Write,
    rows: impl Iterator<Item = (&'a String, &'a Vec<f64>, Option<usize>)>,
) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut rows = rows.peekable();
    let (dim, labeled) = rows.peek().map_or((FEATURE_DIM, true), |r| (r.1.len(), r.2.is_some()));
    let mut header = vec!["id".to_string()];
    header.extend((1..=dim).map(|k| format!("f{k}")));
    if labeled {
        header.push("label".into());
    }
    out.write_record(&header)?;
    for (id, feats, label) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(feats.iter().map(|v| fmt6(*v)));
        if let Some(l) = label {
            rec.push(l.to_string());
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Observations of a smooth unit-variance field at `n` uniform points in a
/// `side_km` square around [`CENTER`].
pub fn smooth_field_samples(n: usize, side_km: f64, length_scale_km: f64, seed: u64) -> Vec<(Geocode, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = SmoothField::new(length_scale_km, 300, &mut rng);
    let origin = Geocode::new(CENTER.0, CENTER.1).expect("valid center");
    let km_lat = 1.0 / 111.195;
    let km_lon = km_lat / CENTER.0.to_radians().cos();
    (0..n)
        .map(|_| {
            let x = rng.random_range(-side_km / 2.0..side_km / 2.0);
            let y = rng.random_range(-side_km / 2.0..side_km / 2.0);
            let g = Geocode::new(CENTER.0 + y * km_lat, CENTER.1 + x * km_lon).expect("valid");
            let (north, east) = local_offset_km(origin, g);
            (g, field.value(east, north))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_metadata_reader, parse_vision_reader};

    #[test]
    fn deterministic_and_sized() {
        let cfg = CityConfig {
            n_buildings: 300,
            ..Default::default()
        };
        let a = generate_city(&cfg);
        assert_eq!(a, generate_city(&cfg));
        assert_eq!(a.buildings.len(), 300);
        assert_ne!(a, generate_city(&CityConfig { seed: 8, ..cfg }));
    }

    #[test]
    fn csvs_parse_cleanly() {
        let city = generate_city(&CityConfig {
            n_buildings: 400,
            ..Default::default()
        });
        let mut meta = Vec::new();
        city.write_metadata_csv(&mut meta).unwrap();
        let parsed = parse_metadata_reader(meta.as_slice(), &metadata_spec()).unwrap();
        assert!(parsed.rejects.is_empty());
        assert_eq!(parsed.inventory.len(), 400);
        let no_geo = parsed.inventory.records().iter().filter(|r| r.geocode.is_none()).count();
        assert_eq!(no_geo, city.buildings.iter().filter(|b| b.hide_geocode).count());

        let mut vis = Vec::new();
        city.write_vision_csv(&mut vis).unwrap();
        let parsed = parse_vision_reader(vis.as_slice(), &vision_spec()).unwrap();
        assert!(parsed.rejects.is_empty());
        assert_eq!(parsed.inventory.len(), city.buildings.iter().filter(|b| b.in_vision).count());
    }

    #[test]
    fn class_is_spatially_clustered() {
        let city = generate_city(&CityConfig {
            n_buildings: 800,
            ..Default::default()
        });
        let pos = city.buildings.iter().filter(|b| b.soft_story).count();
        assert!(pos > 150 && pos < 650, "{pos}");
        // a building's class agrees with its nearest neighbor's more often than chance
        let agree = city
            .buildings
            .iter()
            .enumerate()
            .filter(|(i, b)| {
                let nn = city
                    .buildings
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| j != i)
                    .min_by(|x, y| {
                        let d = |o: &SyntheticBuilding| crate::surf::haversine_distance(b.geocode, o.geocode);
                        d(x.1).total_cmp(&d(y.1))
                    })
                    .unwrap()
                    .1;
                nn.soft_story == b.soft_story
            })
            .count() as f64
            / 800.0;
        let p = pos as f64 / 800.0;
        assert!(agree > p * p + (1.0 - p) * (1.0 - p) + 0.05, "{agree}");
    }

    #[test]
    fn split_partitions_buildings() {
        let city = generate_city(&CityConfig {
            n_buildings: 500,
            ..Default::default()
        });
        let s = city.selftrain_split(3);
        assert_eq!(s.seed.len() + s.pool.len() + s.test.len(), 500);
        assert_eq!(s.test.len(), 150);
        assert_eq!(s.seed.len(), 50);
    }

    #[test]
    fn smooth_field_has_unit_scale() {
        let v: Vec<f64> = smooth_field_samples(2000, 20.0, 0.5, 1).iter().map(|s| s.1).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.2 && (0.6..1.4).contains(&var), "{mean} {var}");
    }
}

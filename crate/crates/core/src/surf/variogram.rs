//! Empirical semivariograms and parametric model fitting.

use serde::{Deserialize, Serialize};

use super::geo::haversine_distance;
use super::neighbors::SpatialSample;
use super::SurfError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramBin {
    /// Mean pair separation in meters.
    pub mean_lag: f64,
    pub semivariance: f64,
    pub pair_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalVariogram {
    pub bins: Vec<VariogramBin>,
    pub max_lag: f64,
}

impl EmpiricalVariogram {
    pub fn is_flat_zero(&self) -> bool {
        self.bins.iter().all(|b| b.semivariance == 0.0)
    }
}

/// Matheron estimator over equal-width lag bins on `[0, max_lag]`. Pairs are
/// visited in `(i, j)` order with `i < j`; empty bins are dropped.
pub fn empirical_variogram(
    samples: &[SpatialSample],
    n_bins: usize,
    max_lag: f64,
) -> Result<EmpiricalVariogram, SurfError> {
    if samples.len() < 2 {
        return Err(SurfError::InvalidParameter("empirical variogram needs at least 2 samples".into()));
    }
    if n_bins == 0 {
        return Err(SurfError::InvalidParameter("n_bins must be at least 1".into()));
    }
    if !(max_lag > 0.0 && max_lag.is_finite()) {
        return Err(SurfError::InvalidParameter("max_lag must be positive".into()));
    }
    let width = max_lag / n_bins as f64;
    let mut sq = vec![0.0; n_bins];
    let mut lag = vec![0.0; n_bins];
    let mut count = vec![0u64; n_bins];
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            let d = haversine_distance(a.location, b.location);
            if d > max_lag {
                continue;
            }
            let bin = ((d / width) as usize).min(n_bins - 1);
            sq[bin] += (a.value - b.value).powi(2);
            lag[bin] += d;
            count[bin] += 1;
        }
    }
    let bins: Vec<VariogramBin> = (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| VariogramBin {
            mean_lag: lag[b] / count[b] as f64,
            semivariance: sq[b] / (2.0 * count[b] as f64),
            pair_count: count[b],
        })
        .collect();
    if bins.is_empty() {
        return Err(SurfError::NoPairsWithinMaxLag(max_lag));
    }
    Ok(EmpiricalVariogram { bins, max_lag })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariogramFamily {
    #[default]
    Exponential,
    Gaussian,
    Spherical,
}

impl std::str::FromStr for VariogramFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" => Ok(Self::Exponential),
            "gaussian" => Ok(Self::Gaussian),
            "spherical" => Ok(Self::Spherical),
            other => Err(format!("unknown variogram family `{other}`")),
        }
    }
}

/// Parametric semivariogram. `range` is the effective range: Exponential and
/// Gaussian reach 95% of the partial sill there, Spherical reaches the sill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramModel {
    pub family: VariogramFamily,
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
}

impl VariogramModel {
    pub fn new(family: VariogramFamily, nugget: f64, sill: f64, range: f64) -> Result<Self, SurfError> {
        let m = Self {
            family,
            nugget,
            sill,
            range,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), SurfError> {
        let finite = self.nugget.is_finite() && self.sill.is_finite() && self.range.is_finite();
        if !finite || self.nugget < 0.0 || self.sill < self.nugget || self.range <= 0.0 {
            return Err(SurfError::InvalidModel(*self));
        }
        Ok(())
    }

    pub fn partial_sill(&self) -> f64 {
        self.sill - self.nugget
    }

    /// γ(h) without argument checking; `h` must be non-negative.
    #[inline]
    pub fn gamma(&self, h: f64) -> f64 {
        if h <= 0.0 {
            return 0.0;
        }
        let ps = self.sill - self.nugget;
        let shape = match self.family {
            VariogramFamily::Exponential => 1.0 - (-3.0 * h / self.range).exp(),
            VariogramFamily::Gaussian => 1.0 - (-3.0 * h * h / (self.range * self.range)).exp(),
            VariogramFamily::Spherical => {
                if h >= self.range {
                    1.0
                } else {
                    let r = h / self.range;
                    1.5 * r - 0.5 * r * r * r
                }
            }
        };
        self.nugget + ps * shape
    }

    /// Covariance `C(h) = sill − γ(h)`, with `C(0) = sill`.
    pub fn covariance(&self, h: f64) -> f64 {
        self.sill - self.gamma(h)
    }
}

pub fn variogram_value(model: &VariogramModel, h: f64) -> Result<f64, SurfError> {
    if h < 0.0 || h.is_nan() {
        return Err(SurfError::NegativeLag(h));
    }
    Ok(model.gamma(h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramFit {
    pub model: VariogramModel,
    /// Set when the empirical variogram is identically zero.
    pub degenerate: bool,
    /// Pair-count weighted squared error at the optimum.
    pub weighted_sse: f64,
}

fn weighted_sse(emp: &EmpiricalVariogram, m: &VariogramModel) -> f64 {
    emp.bins
        .iter()
        .map(|b| b.pair_count as f64 * (m.gamma(b.mean_lag) - b.semivariance).powi(2))
        .sum()
}

/// Scaled parameters: nugget and partial sill over the largest empirical
/// semivariance, range over `max_lag`.
struct Scaled<'a> {
    emp: &'a EmpiricalVariogram,
    family: VariogramFamily,
    gscale: f64,
    hscale: f64,
    norm: f64,
}

impl Scaled<'_> {
    fn project(&self, x: [f64; 3]) -> [f64; 3] {
        [x[0].max(0.0), x[1].max(1e-9), x[2].max(1e-4)]
    }

    fn model(&self, x: [f64; 3]) -> VariogramModel {
        let [n, ps, r] = self.project(x);
        VariogramModel {
            family: self.family,
            nugget: n * self.gscale,
            sill: (n + ps) * self.gscale,
            range: r * self.hscale,
        }
    }

    fn objective(&self, x: [f64; 3]) -> f64 {
        weighted_sse(self.emp, &self.model(x)) / self.norm
    }
}

const NUGGET_GRID: [f64; 10] = [0.0, 0.025, 0.05, 0.1, 0.15, 0.2, 0.3, 0.45, 0.6, 0.8];
const SILL_GRID: [f64; 12] = [0.3, 0.45, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.25, 1.4, 1.7, 2.0];

/// Weighted least-squares fit of a variogram family: coarse grid search over
/// (nugget, sill, range) followed by Nelder-Mead refinement with the
/// parameter constraints enforced by projection.
pub fn fit_variogram(emp: &EmpiricalVariogram, family: VariogramFamily) -> Result<VariogramFit, SurfError> {
    if emp.bins.len() < 3 {
        return Err(SurfError::TooFewBins(emp.bins.len()));
    }
    if emp.is_flat_zero() {
        return Ok(VariogramFit {
            model: VariogramModel {
                family,
                nugget: 0.0,
                sill: 0.0,
                range: emp.max_lag,
            },
            degenerate: true,
            weighted_sse: 0.0,
        });
    }
    let gscale = emp.bins.iter().map(|b| b.semivariance).fold(0.0, f64::max);
    let total_pairs: f64 = emp.bins.iter().map(|b| b.pair_count as f64).sum();
    let problem = Scaled {
        emp,
        family,
        gscale,
        hscale: emp.max_lag,
        norm: total_pairs * gscale * gscale,
    };

    let mut best = ([0.0, 1.0, 0.5], f64::INFINITY);
    for &n in &NUGGET_GRID {
        for &s in &SILL_GRID {
            if s <= n {
                continue;
            }
            for ri in 0..24 {
                // geometric ladder from 0.02 to 2.0 of max_lag
                let r = 0.02 * 100f64.powf(ri as f64 / 23.0);
                let x = [n, s - n, r];
                let f = problem.objective(x);
                if f < best.1 {
                    best = (x, f);
                }
            }
        }
    }

    let mut x = best.0;
    for _ in 0..3 {
        let (nx, _) = nelder_mead(|p| problem.objective(p), x, 2000, 1e-15);
        x = problem.project(nx);
    }
    let model = problem.model(x);
    Ok(VariogramFit {
        model,
        degenerate: false,
        weighted_sse: weighted_sse(emp, &model),
    })
}

fn nelder_mead(f: impl Fn([f64; 3]) -> f64, start: [f64; 3], max_iter: usize, ftol: f64) -> ([f64; 3], f64) {
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    simplex.push((start, f(start)));
    for i in 0..3 {
        let mut p = start;
        p[i] += if p[i].abs() > 1e-3 { 0.1 * p[i] } else { 0.025 };
        simplex.push((p, f(p)));
    }
    let lerp = |a: [f64; 3], b: [f64; 3], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])];
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if (simplex[3].1 - simplex[0].1).abs() <= ftol * (simplex[0].1.abs() + 1e-30) {
            break;
        }
        let mut centroid = [0.0; 3];
        for (p, _) in &simplex[..3] {
            for k in 0..3 {
                centroid[k] += p[k] / 3.0;
            }
        }
        let worst = simplex[3];
        let reflected = lerp(centroid, worst.0, -1.0);
        let fr = f(reflected);
        if fr < simplex[0].1 {
            let expanded = lerp(centroid, worst.0, -2.0);
            let fe = f(expanded);
            simplex[3] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflected, fr);
        } else {
            let contracted = if fr < worst.1 {
                lerp(centroid, reflected, 0.5)
            } else {
                lerp(centroid, worst.0, 0.5)
            };
            let fc = f(contracted);
            if fc < worst.1.min(fr) {
                simplex[3] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    v.0 = lerp(best, v.0, 0.5);
                    v.1 = f(v.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bim::Geocode;
    use crate::surf::geo::EARTH_RADIUS_M;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn at(lat: f64, lon: f64, v: f64) -> SpatialSample {
        SpatialSample::new(Geocode::new(lat, lon).unwrap(), v).unwrap()
    }

    fn model(f: VariogramFamily, n: f64, s: f64, r: f64) -> VariogramModel {
        VariogramModel::new(f, n, s, r).unwrap()
    }

    #[test]
    fn gamma_at_zero_is_zero() {
        for f in [VariogramFamily::Exponential, VariogramFamily::Gaussian, VariogramFamily::Spherical] {
            assert_eq!(variogram_value(&model(f, 0.3, 1.0, 100.0), 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn spherical_reaches_sill_at_range() {
        let m = model(VariogramFamily::Spherical, 0.2, 1.3, 250.0);
        assert_eq!(variogram_value(&m, 250.0).unwrap(), 1.3);
        assert_eq!(variogram_value(&m, 900.0).unwrap(), 1.3);
    }

    #[test]
    fn exponential_hand_value() {
        let m = model(VariogramFamily::Exponential, 0.1, 1.0, 500.0);
        let expected = 0.1 + 0.9 * (1.0 - (-3.0f64).exp());
        let v = variogram_value(&m, 500.0).unwrap();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.955_191_6).abs() < 1e-6);
    }

    #[test]
    fn effective_range_convention() {
        for f in [VariogramFamily::Exponential, VariogramFamily::Gaussian] {
            let m = model(f, 0.0, 1.0, 300.0);
            assert!((m.gamma(300.0) - 0.950_212_9).abs() < 1e-6);
        }
    }

    #[test]
    fn negative_lag_and_invalid_models() {
        let m = model(VariogramFamily::Gaussian, 0.0, 1.0, 1.0);
        assert!(matches!(variogram_value(&m, -1.0), Err(SurfError::NegativeLag(_))));
        assert!(VariogramModel::new(VariogramFamily::Gaussian, 0.5, 0.4, 1.0).is_err());
        assert!(VariogramModel::new(VariogramFamily::Gaussian, 0.0, 1.0, 0.0).is_err());
        assert!(VariogramModel::new(VariogramFamily::Gaussian, -0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn constant_field_is_flat() {
        let s: Vec<_> = (0..20).map(|i| at(37.8 + i as f64 * 1e-4, -122.27, 4.2)).collect();
        let emp = empirical_variogram(&s, 5, 500.0).unwrap();
        assert!(emp.bins.iter().all(|b| b.semivariance == 0.0));
        let fit = fit_variogram(&emp, VariogramFamily::Exponential).unwrap();
        assert!(fit.degenerate);
        assert_eq!((fit.model.nugget, fit.model.sill, fit.model.range), (0.0, 0.0, 500.0));
    }

    #[test]
    fn single_pair_estimator() {
        let s = vec![at(37.8, -122.27, 0.0), at(37.801, -122.27, 2.0)];
        let h = haversine_distance(s[0].location, s[1].location);
        let emp = empirical_variogram(&s, 4, 200.0).unwrap();
        assert_eq!(emp.bins.len(), 1);
        assert_eq!(emp.bins[0].semivariance, 2.0);
        assert_eq!(emp.bins[0].pair_count, 1);
        assert_eq!(emp.bins[0].mean_lag, h);
    }

    #[test]
    fn no_pairs_within_max_lag() {
        let s = vec![at(37.8, -122.27, 0.0), at(37.9, -122.27, 2.0)];
        assert!(matches!(empirical_variogram(&s, 4, 100.0), Err(SurfError::NoPairsWithinMaxLag(_))));
        assert!(empirical_variogram(&s[..1], 4, 100.0).is_err());
    }

    #[test]
    fn too_few_bins() {
        let emp = EmpiricalVariogram {
            bins: vec![VariogramBin { mean_lag: 1.0, semivariance: 1.0, pair_count: 3 }; 2],
            max_lag: 10.0,
        };
        assert!(matches!(fit_variogram(&emp, VariogramFamily::Spherical), Err(SurfError::TooFewBins(2))));
    }

    #[test]
    fn noise_free_recovery() {
        for (family, truth) in [
            (VariogramFamily::Exponential, (0.1, 1.0, 500.0)),
            (VariogramFamily::Gaussian, (0.05, 2.0, 800.0)),
            (VariogramFamily::Spherical, (0.2, 1.5, 600.0)),
        ] {
            let m = model(family, truth.0, truth.1, truth.2);
            let bins = (1..=15)
                .map(|i| {
                    let h = i as f64 * 100.0 - 50.0;
                    VariogramBin { mean_lag: h, semivariance: m.gamma(h), pair_count: 100 + 10 * i }
                })
                .collect();
            let emp = EmpiricalVariogram { bins, max_lag: 1500.0 };
            let fit = fit_variogram(&emp, family).unwrap().model;
            let rel = |a: f64, b: f64| ((a - b) / b).abs();
            assert!(rel(fit.sill, truth.1) < 0.01, "{family:?} sill {fit:?}");
            assert!(rel(fit.range, truth.2) < 0.01, "{family:?} range {fit:?}");
            assert!(rel(fit.nugget, truth.0) < 0.01, "{family:?} nugget {fit:?}");
        }
    }

    #[test]
    fn monotone_exponential_and_spherical() {
        for f in [VariogramFamily::Exponential, VariogramFamily::Spherical] {
            let m = model(f, 0.1, 1.0, 400.0);
            let mut prev = 0.0;
            for i in 0..2000 {
                let v = m.gamma(i as f64);
                assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<_> = (0..120)
            .map(|_| {
                let dn = rng.random::<f64>() * 2000.0 / EARTH_RADIUS_M;
                at(37.8 + dn.to_degrees(), -122.27 + rng.random::<f64>() * 0.02, rng.random::<f64>())
            })
            .collect();
        let emp = empirical_variogram(&s, 10, 1500.0).unwrap();
        let width = 150.0;
        let mut sums = [(0.0f64, 0.0f64, 0u64); 10];
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                let d = haversine_distance(s[i].location, s[j].location);
                if d <= 1500.0 {
                    let b = ((d / width) as usize).min(9);
                    sums[b].0 += (s[i].value - s[j].value).powi(2);
                    sums[b].1 += d;
                    sums[b].2 += 1;
                }
            }
        }
        let oracle: Vec<_> = sums.iter().filter(|t| t.2 > 0).collect();
        assert_eq!(oracle.len(), emp.bins.len());
        for (b, o) in emp.bins.iter().zip(oracle) {
            assert_eq!(b.pair_count, o.2);
            assert_eq!(b.semivariance, o.0 / (2.0 * o.2 as f64));
            assert_eq!(b.mean_lag, o.1 / o.2 as f64);
        }
    }
}

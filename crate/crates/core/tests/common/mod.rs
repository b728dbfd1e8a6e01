//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use bimkit::selftrain::Confusion;
use bimkit::surf::mlp::{loss, loss_and_gradient};
use bimkit::surf::{haversine_distance, Dataset, MlpModel, NeighborContext, SpatialSample, VariogramModel};
use bimkit::{AttributeKind, AttributeValue, BuildingRecord, Geocode, Inventory, Provenance, Schema};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const R_EARTH: f64 = 6_371_000.0;

/// Great-circle distance by the spherical law of cosines. Loses precision
/// below a few meters; use only for well-separated points.
pub fn cosine_law_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dl = (b.1 - a.1).to_radians();
    let c = (p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos()).clamp(-1.0, 1.0);
    R_EARTH * c.acos()
}

/// Haversine written from the textbook formula.
pub fn oracle_haversine(a: Geocode, b: Geocode) -> f64 {
    let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
    let h = ((p2 - p1) / 2.0).sin().powi(2) + p1.cos() * p2.cos() * ((b.lon() - a.lon()).to_radians() / 2.0).sin().powi(2);
    2.0 * R_EARTH * h.sqrt().asin()
}

/// Closed-form semivariance, effective-range convention.
pub fn oracle_gamma(m: &VariogramModel, h: f64) -> f64 {
    use bimkit::surf::VariogramFamily::*;
    if h == 0.0 {
        return 0.0;
    }
    let ps = m.sill - m.nugget;
    let r = m.range;
    m.nugget
        + ps * match m.family {
            Exponential => 1.0 - (-3.0 * h / r).exp(),
            Gaussian => 1.0 - (-3.0 * h * h / (r * r)).exp(),
            Spherical if h >= r => 1.0,
            Spherical => 1.5 * h / r - 0.5 * (h / r).powi(3),
        }
}

pub struct OracleKriging {
    pub mean: f64,
    pub variance: f64,
    pub weights: Vec<f64>,
}

/// Ordinary kriging by a dense LU solve of the augmented system.
pub fn dense_krige(model: &VariogramModel, ctx: &NeighborContext) -> OracleKriging {
    let n = ctx.neighbors.len();
    let pts: Vec<Geocode> = ctx.neighbors.iter().map(|nb| nb.sample.location).collect();
    let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
    let mut b = DVector::<f64>::zeros(n + 1);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = oracle_gamma(model, oracle_haversine(pts[i], pts[j]));
        }
        a[(i, n)] = 1.0;
        a[(n, i)] = 1.0;
        b[i] = oracle_gamma(model, oracle_haversine(pts[i], ctx.target));
    }
    b[n] = 1.0;
    let x = a.lu().solve(&b).expect("non-singular oracle system");
    let weights: Vec<f64> = x.iter().take(n).copied().collect();
    let mean = weights.iter().zip(&ctx.neighbors).map(|(w, nb)| w * nb.sample.value).sum();
    let variance = (0..n).map(|i| weights[i] * b[i]).sum::<f64>() + x[n];
    OracleKriging {
        mean,
        variance: variance.max(0.0),
        weights,
    }
}

/// Matheron estimator by listing every pair first, then scanning the list
/// once per bin.
pub fn brute_variogram(samples: &[SpatialSample], n_bins: usize, max_lag: f64) -> Vec<(f64, f64, u64)> {
    let mut pairs = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let d = haversine_distance(samples[i].location, samples[j].location);
            pairs.push((d, (samples[i].value - samples[j].value).powi(2)));
        }
    }
    let width = max_lag / n_bins as f64;
    let bin_of = |d: f64| {
        let mut b = 0;
        while b + 1 < n_bins && (b + 1) as f64 * width <= d {
            b += 1;
        }
        b
    };
    (0..n_bins)
        .filter_map(|b| {
            let (mut lag, mut sq, mut c) = (0.0, 0.0, 0u64);
            for &(d, s) in &pairs {
                if d <= max_lag && bin_of(d) == b {
                    lag += d;
                    sq += s;
                    c += 1;
                }
            }
            (c > 0).then(|| (lag / c as f64, sq / (2.0 * c as f64), c))
        })
        .collect()
}

/// `n` uniform points in a `side_m` square around (37.8, −122.27).
pub fn uniform_points(n: usize, side_m: f64, rng: &mut impl Rng) -> Vec<Geocode> {
    let dlat = side_m / 111_195.0;
    let dlon = dlat / 37.8f64.to_radians().cos();
    (0..n)
        .map(|_| {
            Geocode::new(
                37.8 + rng.random_range(-0.5..0.5) * dlat,
                -122.27 + rng.random_range(-0.5..0.5) * dlon,
            )
            .unwrap()
        })
        .collect()
}

/// Exact Gaussian random field draw with the model's covariance
/// (`sill − γ(h)`, nugget on the diagonal) by Cholesky factorization.
pub fn simulate_field(model: &VariogramModel, pts: &[Geocode], rng: &mut impl Rng) -> Vec<f64> {
    let n = pts.len();
    let c = DMatrix::from_fn(n, n, |i, j| model.sill - oracle_gamma(model, oracle_haversine(pts[i], pts[j])));
    let l = c.cholesky().expect("positive definite covariance").l();
    let eps = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    (l * eps).iter().copied().collect()
}

/// Largest relative discrepancy between the analytic gradient and central
/// finite differences with step `h`.
pub fn gradient_check(model: &MlpModel, data: &Dataset, h: f64) -> f64 {
    let (_, g) = loss_and_gradient(model, data).unwrap();
    let analytic = g.flatten();
    let params = model.parameters();
    let mut worst: f64 = 0.0;
    for k in 0..params.len() {
        let mut m = model.clone();
        let mut p = params.clone();
        p[k] = params[k] + h;
        m.set_parameters(&p);
        let up = loss(&m, data).unwrap();
        p[k] = params[k] - h;
        m.set_parameters(&p);
        let down = loss(&m, data).unwrap();
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[k].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    worst
}

/// Plain logistic regression by full-batch gradient descent; returns the
/// training accuracy it reaches.
pub fn logistic_accuracy(x: &[Vec<f64>], y: &[usize], epochs: usize, lr: f64) -> f64 {
    let d = x[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..epochs {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = w.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - yi as f64;
            for k in 0..d {
                gw[k] += err * xi[k];
            }
            gb += err;
        }
        for k in 0..d {
            w[k] -= lr * gw[k] / x.len() as f64;
        }
        b -= lr * gb / x.len() as f64;
    }
    let correct = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| {
            let z: f64 = w.iter().zip(xi.iter()).map(|(a, b)| a * b).sum::<f64>() + b;
            usize::from(z > 0.0) == yi
        })
        .count();
    correct as f64 / x.len() as f64
}

/// Two Gaussian blobs in 2D, `n/2` per class, `gap` apart on each axis.
pub fn blobs(n: usize, gap: f64, sd: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let m = if c == 0 { -gap / 2.0 } else { gap / 2.0 };
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        x.push(vec![m + sd * a, m + sd * b]);
        y.push(c);
    }
    (x, y)
}

/// Confusion matrix of 10⁸ items whose precision and recall equal `p` and
/// `r` given in basis points: TP = p·r, FP = r·(10⁴ − p), FN = p·(10⁴ − r).
pub fn confusion_for(p_bp: u64, r_bp: u64) -> Confusion {
    let tp = p_bp * r_bp;
    let fp = r_bp * (10_000 - p_bp);
    let fn_ = p_bp * (10_000 - r_bp);
    Confusion {
        tp,
        fp,
        fn_,
        tn: 100_000_000 - tp - fp - fn_,
    }
}

/// Inventory with one numeric attribute `v` from `(geocode, value)` pairs.
pub fn numeric_inventory(points: &[(Geocode, f64)]) -> Inventory {
    let schema: Schema = [("v".to_string(), AttributeKind::Numeric)].into_iter().collect();
    let recs = points
        .iter()
        .enumerate()
        .map(|(i, &(g, v))| {
            BuildingRecord::new(format!("r{i:04}"))
                .with_geocode(g)
                .with_attribute("v", AttributeValue::numeric(v).unwrap(), Provenance::Metadata)
        })
        .collect();
    Inventory::new(schema, recs).unwrap()
}

/// Smooth field observations used by the imputation oracles.
pub fn smooth_inventory(n: usize, seed: u64) -> Inventory {
    let pts = bimkit::synth::smooth_field_samples(n, 3.0, 0.8, seed);
    numeric_inventory(&pts)
}

//! Ordinary kriging.
//!
//! For neighbors `z_1..z_n` at pairwise semivariances `Γ_ij` and target
//! semivariances `γ_i0`, the weights solve
//!
//! ```text
//! | Γ   1 | | w |   | γ0 |
//! | 1ᵀ  0 | | μ | = | 1  |
//! ```
//!
//! giving mean `Σ w_i z_i` and variance `Σ w_i γ_i0 + μ`.

use serde::{Deserialize, Serialize};

use super::geo::haversine_distance;
use super::linalg::{lu_solve, Dense};
use super::neighbors::NeighborContext;
use super::variogram::VariogramModel;
use super::SurfError;
use crate::bim::Geocode;

/// Diagonal regularization applied when the first solve fails.
pub const JITTER: f64 = 1e-10;

/// Locations closer than this (meters) are merged before the final retry.
const DUPLICATE_TOL_M: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrigingPrediction {
    pub mean: f64,
    pub variance: f64,
    /// One weight per context neighbor, in context order.
    pub weights: Vec<f64>,
    /// Lagrange multiplier of the unbiasedness constraint.
    pub lagrange: f64,
}

impl KrigingPrediction {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

fn system(model: &VariogramModel, sites: &[Geocode], target_gamma: &[f64], jitter: f64) -> (Dense, Vec<f64>) {
    let n = sites.len();
    let mut a = Dense::zeros(n + 1);
    for i in 0..n {
        for j in i + 1..n {
            let g = model.gamma(haversine_distance(sites[i], sites[j]));
            a.set(i, j, g);
            a.set(j, i, g);
        }
        a.set(i, i, jitter);
        a.set(i, n, 1.0);
        a.set(n, i, 1.0);
    }
    let mut b = target_gamma.to_vec();
    b.push(1.0);
    (a, b)
}

fn solve(model: &VariogramModel, sites: &[Geocode], target_gamma: &[f64]) -> Option<Vec<f64>> {
    let (a, b) = system(model, sites, target_gamma, 0.0);
    lu_solve(&a, &b).or_else(|| {
        log::trace!("kriging system singular; retrying with jitter");
        let (a, b) = system(model, sites, target_gamma, JITTER);
        lu_solve(&a, &b)
    })
}

/// Ordinary kriging prediction at `ctx.target` from its neighbors.
pub fn krige(model: &VariogramModel, ctx: &NeighborContext) -> Result<KrigingPrediction, SurfError> {
    model.validate()?;
    if ctx.is_empty() {
        return Err(SurfError::NoSamples);
    }
    let sites: Vec<Geocode> = ctx.neighbors.iter().map(|n| n.sample.location).collect();
    let values: Vec<f64> = ctx.values().collect();
    let target_gamma: Vec<f64> = ctx.neighbors.iter().map(|n| model.gamma(n.distance)).collect();

    if let Some(sol) = solve(model, &sites, &target_gamma) {
        let n = sites.len();
        return Ok(finish(&sol[..n], sol[n], &values, &target_gamma));
    }

    // Collapse coincident neighbors into one averaged site and split the
    // group weight evenly back over its members.
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, s) in sites.iter().enumerate() {
        match groups
            .iter_mut()
            .find(|g| haversine_distance(sites[g[0]], *s) < DUPLICATE_TOL_M)
        {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    if groups.len() == sites.len() {
        return Err(SurfError::SingularSystem);
    }
    let g_sites: Vec<Geocode> = groups.iter().map(|g| sites[g[0]]).collect();
    let g_values: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().map(|&i| values[i]).sum::<f64>() / g.len() as f64)
        .collect();
    let g_gamma: Vec<f64> = groups.iter().map(|g| target_gamma[g[0]]).collect();
    let sol = solve(model, &g_sites, &g_gamma).ok_or(SurfError::SingularSystem)?;
    let m = groups.len();
    let mut pred = finish(&sol[..m], sol[m], &g_values, &g_gamma);
    let mut weights = vec![0.0; sites.len()];
    for (g, w) in groups.iter().zip(&pred.weights) {
        for &i in g {
            weights[i] = w / g.len() as f64;
        }
    }
    pred.weights = weights;
    Ok(pred)
}

fn finish(weights: &[f64], lagrange: f64, values: &[f64], target_gamma: &[f64]) -> KrigingPrediction {
    let mean = weights.iter().zip(values).map(|(w, z)| w * z).sum();
    let variance: f64 = weights.iter().zip(target_gamma).map(|(w, g)| w * g).sum::<f64>() + lagrange;
    KrigingPrediction {
        mean,
        variance: variance.max(0.0),
        weights: weights.to_vec(),
        lagrange,
    }
}

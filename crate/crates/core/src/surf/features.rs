//! Fixed-length neighbor encodings for the neural mapping function.

use super::geo::local_offset_km;
use super::neighbors::NeighborContext;

/// Default number of neighbors encoded per site.
pub const DEFAULT_K: usize = 8;

/// Length of the vector produced by [`build_neighbor_features`].
pub fn feature_len(k: usize) -> usize {
    4 * k
}

/// Encodes the first `k` neighbors as `(value, Δnorth_km, Δeast_km)` triples
/// relative to the target, zero-padded, followed by a `k`-entry presence mask.
pub fn build_neighbor_features(ctx: &NeighborContext, k: usize) -> Vec<f64> {
    build_with(ctx, k, |v| v)
}

/// As [`build_neighbor_features`], mapping each neighbor value through `f`
/// first (used for standardization and label encoding).
pub fn build_with(ctx: &NeighborContext, k: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; feature_len(k)];
    for (slot, n) in ctx.neighbors.iter().take(k).enumerate() {
        let (dn, de) = local_offset_km(ctx.target, n.sample.location);
        out[3 * slot] = f(n.sample.value);
        out[3 * slot + 1] = dn;
        out[3 * slot + 2] = de;
        out[3 * k + slot] = 1.0;
    }
    out
}

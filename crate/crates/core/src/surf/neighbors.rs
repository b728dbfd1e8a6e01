//! Nearest-neighbor contexts around a prediction site.
//!
//! [`nearest_neighbors`] is the reference exhaustive scan. [`NeighborIndex`]
//! answers the same queries with a kd-tree over unit-sphere vectors; chord
//! length is monotone in great-circle distance, so the neighbor sets agree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::geo::{haversine_distance, unit_vector};
use super::SurfError;
use crate::bim::Geocode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialSample {
    pub location: Geocode,
    pub value: f64,
}

impl SpatialSample {
    pub fn new(location: Geocode, value: f64) -> Result<Self, SurfError> {
        if !value.is_finite() {
            return Err(SurfError::NonFinite("sample value"));
        }
        Ok(Self { location, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub sample: SpatialSample,
    /// Great-circle distance to the target in meters.
    pub distance: f64,
    /// Position of the sample in the originating sample list.
    pub index: usize,
}

/// The known samples around one prediction site, nearest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborContext {
    pub target: Geocode,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborContext {
    pub fn new(target: Geocode, neighbors: Vec<Neighbor>) -> Result<Self, SurfError> {
        if neighbors.is_empty() {
            return Err(SurfError::NoSamples);
        }
        if neighbors.windows(2).any(|w| w[0].distance > w[1].distance) {
            return Err(SurfError::Unsorted);
        }
        Ok(Self { target, neighbors })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.neighbors.iter().map(|n| n.sample.value)
    }
}

fn by_distance_then_index(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index))
}

/// Exhaustive k-nearest search by haversine distance. Ties go to the sample
/// inserted first.
pub fn nearest_neighbors(samples: &[SpatialSample], target: Geocode, k: usize) -> Result<NeighborContext, SurfError> {
    if samples.is_empty() {
        return Err(SurfError::NoSamples);
    }
    if k == 0 {
        return Err(SurfError::InvalidParameter("k must be at least 1".into()));
    }
    let mut all: Vec<Neighbor> = samples
        .iter()
        .enumerate()
        .map(|(index, s)| Neighbor {
            sample: *s,
            distance: haversine_distance(target, s.location),
            index,
        })
        .collect();
    all.sort_by(by_distance_then_index);
    all.truncate(k);
    NeighborContext::new(target, all)
}

#[derive(Debug, Clone)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Static kd-tree over sample locations.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    samples: Vec<SpatialSample>,
    coords: Vec<[f64; 3]>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

#[derive(PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

fn chord2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

impl NeighborIndex {
    pub fn new(samples: Vec<SpatialSample>) -> Self {
        let coords: Vec<[f64; 3]> = samples.iter().map(|s| unit_vector(s.location)).collect();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut nodes = Vec::with_capacity(samples.len());
        let root = Self::build(&coords, &mut order, &mut nodes);
        Self {
            samples,
            coords,
            nodes,
            root,
        }
    }

    fn build(coords: &[[f64; 3]], items: &mut [usize], nodes: &mut Vec<Node>) -> Option<usize> {
        if items.is_empty() {
            return None;
        }
        let axis = (0..3)
            .map(|ax| {
                let (lo, hi) = items.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(coords[i][ax]), hi.max(coords[i][ax]))
                });
                (ax, hi - lo)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(ax, _)| ax)
            .unwrap_or(0);
        let mid = items.len() / 2;
        items.select_nth_unstable_by(mid, |&a, &b| coords[a][axis].total_cmp(&coords[b][axis]).then(a.cmp(&b)));
        let point = items[mid];
        let slot = nodes.len();
        nodes.push(Node {
            point,
            axis,
            left: None,
            right: None,
        });
        let (lo, rest) = items.split_at_mut(mid);
        let left = Self::build(coords, lo, nodes);
        let right = Self::build(coords, &mut rest[1..], nodes);
        nodes[slot].left = left;
        nodes[slot].right = right;
        Some(slot)
    }

    pub fn samples(&self) -> &[SpatialSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same result as [`nearest_neighbors`] over the indexed samples.
    pub fn query(&self, target: Geocode, k: usize) -> Result<NeighborContext, SurfError> {
        self.query_excluding(target, k, None)
    }

    /// k-nearest search skipping the sample at position `exclude`.
    pub fn query_excluding(
        &self,
        target: Geocode,
        k: usize,
        exclude: Option<usize>,
    ) -> Result<NeighborContext, SurfError> {
        if k == 0 {
            return Err(SurfError::InvalidParameter("k must be at least 1".into()));
        }
        let q = unit_vector(target);
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if let Some(root) = self.root {
            self.search(root, &q, k, exclude, &mut heap);
        }
        if heap.is_empty() {
            return Err(SurfError::NoSamples);
        }
        let mut found: Vec<Neighbor> = heap
            .into_iter()
            .map(|c| Neighbor {
                sample: self.samples[c.index],
                distance: haversine_distance(target, self.samples[c.index].location),
                index: c.index,
            })
            .collect();
        found.sort_by(by_distance_then_index);
        NeighborContext::new(target, found)
    }

    fn search(&self, node: usize, q: &[f64; 3], k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Candidate>) {
        let n = &self.nodes[node];
        let p = &self.coords[n.point];
        if exclude != Some(n.point) {
            let cand = Candidate {
                d2: chord2(p, q),
                index: n.point,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if heap.peek().is_some_and(|worst| cand < *worst) {
                heap.pop();
                heap.push(cand);
            }
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, q, k, exclude, heap);
        }
        if let Some(c) = far {
            let full = heap.len() >= k;
            if !full || heap.peek().is_some_and(|w| diff * diff <= w.d2) {
                self.search(c, q, k, exclude, heap);
            }
        }
    }
}

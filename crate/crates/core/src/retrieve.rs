//! Exact k-nearest retrieval over location centers and ranking metrics.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{from_mercator, geodesic_distance, MercatorPoint};
use crate::ingest::{CoordKind, Location, LocationId};

#[derive(Debug, Error, PartialEq)]
pub enum RetrieveError {
    #[error("index needs at least one location")]
    Empty,
    #[error("location {0} has a non-finite center")]
    NonFinite(LocationId),
    #[error("length mismatch: {0} predictions, {1} truths")]
    LengthMismatch(usize, usize),
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Clone, Copy, Debug)]
struct Node {
    point: [f64; 2],
    id: LocationId,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Balanced 2-d tree (median split, alternating axes). Immutable once
/// built, so it can be shared freely between query threads.
#[derive(Clone, Debug)]
pub struct LocationIndex {
    nodes: Vec<Node>,
    root: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub xy_o: MercatorPoint,
    /// `(location id, distance in meters)`, nearest first.
    pub topk: Vec<(LocationId, f64)>,
    /// Fewer than `k` candidates existed.
    pub truncated: bool,
}

impl Prediction {
    pub fn ids(&self) -> Vec<LocationId> {
        self.topk.iter().map(|t| t.0).collect()
    }
}

/// Heap entry ordered by squared distance, then id.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Cand {
    d2: f64,
    id: LocationId,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn d2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

impl LocationIndex {
    pub fn build(locations: &[Location]) -> Result<Self, RetrieveError> {
        Self::from_points(locations.iter().map(|l| (l.id, l.center)))
    }

    pub fn from_points(points: impl IntoIterator<Item = (LocationId, MercatorPoint)>) -> Result<Self, RetrieveError> {
        let mut items: Vec<([f64; 2], LocationId)> = Vec::new();
        for (id, c) in points {
            if !(c.x.is_finite() && c.y.is_finite()) {
                return Err(RetrieveError::NonFinite(id));
            }
            items.push(([c.x, c.y], id));
        }
        if items.is_empty() {
            return Err(RetrieveError::Empty);
        }
        let mut nodes = Vec::with_capacity(items.len());
        let root = Self::build_rec(&mut items, 0, &mut nodes).expect("non-empty");
        Ok(Self { nodes, root })
    }

    fn build_rec(items: &mut [([f64; 2], LocationId)], depth: usize, nodes: &mut Vec<Node>) -> Option<usize> {
        if items.is_empty() {
            return None;
        }
        let axis = depth % 2;
        items.sort_by(|a, b| a.0[axis].total_cmp(&b.0[axis]).then(a.1.cmp(&b.1)));
        let mid = items.len() / 2;
        let (point, id) = items[mid];
        let (lo, rest) = items.split_at_mut(mid);
        let left = Self::build_rec(lo, depth + 1, nodes);
        let right = Self::build_rec(&mut rest[1..], depth + 1, nodes);
        nodes.push(Node { point, id, axis, left, right });
        Some(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn search(&self, node: usize, q: [f64; 2], k: usize, heap: &mut BinaryHeap<Cand>) {
        let n = &self.nodes[node];
        let cand = Cand { d2: d2(q, n.point), id: n.id };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().unwrap() {
            heap.pop();
            heap.push(cand);
        }
        let diff = q[n.axis] - n.point[n.axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, q, k, heap);
        }
        if let Some(c) = far {
            // equal distance may still win on id, so only prune strictly
            if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                self.search(c, q, k, heap);
            }
        }
    }

    /// The `k` nearest centers, ties broken by ascending id.
    pub fn query_topk(&self, xy: MercatorPoint, k: usize) -> Result<Prediction, RetrieveError> {
        if k == 0 {
            return Err(RetrieveError::ZeroK);
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(self.root, [xy.x, xy.y], k, &mut heap);
        let topk = heap.into_sorted_vec().into_iter().map(|c| (c.id, c.d2.sqrt())).collect();
        Ok(Prediction { xy_o: xy, topk, truncated: k > self.len() })
    }
}

/// Exhaustive scan with the same ordering, for checking the tree.
pub fn brute_force_topk(points: &[(LocationId, MercatorPoint)], xy: MercatorPoint, k: usize) -> Vec<LocationId> {
    let mut all: Vec<Cand> = points.iter().map(|(id, c)| Cand { d2: d2([xy.x, xy.y], [c.x, c.y]), id: *id }).collect();
    all.sort();
    all.into_iter().take(k).map(|c| c.id).collect()
}

/// Fraction of cases whose truth appears among the first `k` ranked ids.
pub fn hit_at_k(ranked: &[Vec<LocationId>], truths: &[LocationId], k: usize) -> Result<f64, RetrieveError> {
    if ranked.len() != truths.len() {
        return Err(RetrieveError::LengthMismatch(ranked.len(), truths.len()));
    }
    if ranked.is_empty() {
        return Ok(0.0);
    }
    let hits = ranked.iter().zip(truths).filter(|(r, t)| r.iter().take(k).any(|id| id == *t)).count();
    Ok(hits as f64 / ranked.len() as f64)
}

/// Distance between a prediction and a truth center: great-circle for
/// geographic cities, planar for virtual ones.
pub fn point_distance(pred: MercatorPoint, truth: MercatorPoint, kind: CoordKind) -> f64 {
    match kind {
        CoordKind::Geographic => geodesic_distance(from_mercator(pred), from_mercator(truth)),
        CoordKind::Virtual => pred.distance(&truth),
    }
}

pub fn mean_distance(preds: &[MercatorPoint], truths: &[MercatorPoint], kind: CoordKind) -> Result<f64, RetrieveError> {
    if preds.len() != truths.len() {
        return Err(RetrieveError::LengthMismatch(preds.len(), truths.len()));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = preds.iter().zip(truths).map(|(p, t)| point_distance(*p, *t, kind)).sum();
    Ok(total / preds.len() as f64)
}

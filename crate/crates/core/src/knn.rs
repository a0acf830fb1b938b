//! Exact k-nearest-neighbor search over point sets.
//!
//! The index is a median-split kd-tree. Queries are exact under Euclidean
//! distance; candidates at equal distance are ordered by ascending point
//! index, so results are fully deterministic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// A kd-tree over `D`-dimensional points, generic so the same machinery
/// serves 3D scans and 2D projections.
#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    root: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut acc = 0.0;
    for d in 0..D {
        let diff = a[d] - b[d];
        acc += diff * diff;
    }
    acc
}

impl<const D: usize> KdTree<D> {
    pub fn build(points: Vec<[f64; D]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        let root = if points.is_empty() {
            0
        } else {
            build_node(&points, &mut order, 0, &mut nodes)
        };
        Self {
            points,
            order,
            nodes,
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points to `query`, optionally skipping one index.
    /// Returns `(index, squared distance)` sorted by ascending distance,
    /// ties by ascending index.
    pub fn knn(&self, query: &[f64; D], k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.visit(self.root, query, k, skip, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort_unstable();
        out.into_iter().map(|c| (c.index, c.dist2)).collect()
    }

    pub fn nearest(&self, query: &[f64; D]) -> Option<(usize, f64)> {
        self.knn(query, 1, None).into_iter().next()
    }

    fn visit(
        &self,
        node: usize,
        query: &[f64; D],
        k: usize,
        skip: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.order[*start..*end] {
                    if skip == Some(idx) {
                        continue;
                    }
                    let cand = Candidate {
                        dist2: dist2(query, &self.points[idx]),
                        index: idx,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("non-empty heap") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis] - value;
                let (near, far) = if delta < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.visit(near, query, k, skip, heap);
                // Descend on ties so an equal-distance lower index can win.
                let worst = heap.peek().map(|c| c.dist2).unwrap_or(f64::INFINITY);
                if heap.len() < k || delta * delta <= worst {
                    self.visit(far, query, k, skip, heap);
                }
            }
        }
    }
}

fn build_node<const D: usize>(
    points: &[[f64; D]],
    order: &mut [usize],
    offset: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return nodes.len() - 1;
    }
    let mut axis = 0;
    let mut widest = f64::NEG_INFINITY;
    for d in 0..D {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &i in order.iter() {
            lo = lo.min(points[i][d]);
            hi = hi.max(points[i][d]);
        }
        if hi - lo > widest {
            widest = hi - lo;
            axis = d;
        }
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let value = points[order[mid]][axis];
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_node(points, lo, offset, nodes);
    let right = build_node(points, hi, offset + mid, nodes);
    nodes.push(Node::Split {
        axis,
        value,
        left,
        right,
    });
    nodes.len() - 1
}

/// Result of a k-NN query: neighbor indices with their plain Euclidean
/// distances, sorted ascending. `short` is set when fewer than the requested
/// `m` neighbors exist.
#[derive(Debug, Clone)]
pub struct KnnQueryResult {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    pub short: bool,
}

/// Immutable exact nearest-neighbor index over a point cloud.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    tree: KdTree<3>,
}

/// Builds an exact k-NN index over the cloud's points.
pub fn build_knn_index(cloud: &PointCloud) -> Result<KnnIndex> {
    cloud.validate()?;
    let points: Vec<[f64; 3]> = cloud.points.iter().map(|p| [p.x, p.y, p.z]).collect();
    Ok(KnnIndex {
        tree: KdTree::build(points),
    })
}

impl KnnIndex {
    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// The `m` nearest neighbors of the point at `query_point_index`.
    /// With `exclude_self` the query point itself is not a candidate.
    /// If fewer than `m` candidates exist, all of them are returned and the
    /// result is flagged `short`.
    pub fn knn_query(
        &self,
        query_point_index: usize,
        m: usize,
        exclude_self: bool,
    ) -> Result<KnnQueryResult> {
        if m == 0 {
            return Err(Error::InvalidParameter(
                "neighbor count m must be at least 1".into(),
            ));
        }
        if query_point_index >= self.tree.len() {
            return Err(Error::IndexOutOfBounds {
                index: query_point_index,
                len: self.tree.len(),
            });
        }
        let query = self.tree.points[query_point_index];
        let skip = exclude_self.then_some(query_point_index);
        let found = self.tree.knn(&query, m, skip);
        Ok(KnnQueryResult {
            short: found.len() < m,
            indices: found.iter().map(|&(i, _)| i).collect(),
            distances: found.iter().map(|&(_, d2)| d2.sqrt()).collect(),
        })
    }

    /// The `m` nearest neighbors of an arbitrary query position.
    pub fn knn_point(&self, query: &Vector3<f64>, m: usize) -> KnnQueryResult {
        let found = self.tree.knn(&[query.x, query.y, query.z], m, None);
        KnnQueryResult {
            short: found.len() < m,
            indices: found.iter().map(|&(i, _)| i).collect(),
            distances: found.iter().map(|&(_, d2)| d2.sqrt()).collect(),
        }
    }
}

//! Exact nearest-neighbour index and farthest point sampling.
//!
//! All queries break distance ties towards the lowest point id, so the
//! k-d tree returns exactly what a linear scan would.

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

const LEAF_SIZE: usize = 8;

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

/// Immutable k-d tree over a snapshot of a point cloud.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    source: PointCloud,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

impl SpatialIndex {
    pub fn build(source: &PointCloud) -> Self {
        let mut index = SpatialIndex {
            source: source.clone(),
            perm: (0..source.len()).collect(),
            nodes: Vec::new(),
        };
        if !source.is_empty() {
            index.build_node(0, source.len());
        }
        index
    }

    pub fn source(&self) -> &PointCloud {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let pts = self.source.points();
        let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for &i in &self.perm[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(pts[i].get(a));
                hi[a] = hi[a].max(pts[i].get(a));
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a].get(axis).total_cmp(&pts[b].get(axis))
        });
        let value = pts[self.perm[mid]].get(axis);
        // placeholder, patched once children exist
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Closest source point to `q` as `(id, squared distance)`.
    pub fn nearest(&self, q: Point3) -> Result<(usize, f64)> {
        if self.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_in(0, q, &mut best);
        Ok(best)
    }

    fn nearest_in(&self, node: usize, q: Point3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    let d = q.dist2(self.source[i]);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q.get(axis) - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.nearest_in(near, q, best);
                // equal bound may still hide a lower id at the same distance
                if diff * diff <= best.1 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// Nearest neighbour of every query point.
    pub fn nearest_all(&self, queries: &PointCloud) -> Result<Vec<(usize, f64)>> {
        queries.iter().map(|&q| self.nearest(q)).collect()
    }

    /// Ids of all points with squared distance `<= r * r`, ascending.
    pub fn within_radius(&self, q: Point3, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.is_empty() {
            self.radius_in(0, q, r * r, &mut out);
        }
        out.sort_unstable();
        out
    }

    /// Whether any point lies within `r` of `q`.
    pub fn any_within_radius(&self, q: Point3, r: f64) -> bool {
        match self.nearest(q) {
            Ok((_, d)) => d <= r * r,
            Err(_) => false,
        }
    }

    fn radius_in(&self, node: usize, q: Point3, r2: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                out.extend(
                    self.perm[start..end]
                        .iter()
                        .copied()
                        .filter(|&i| q.dist2(self.source[i]) <= r2),
                );
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q.get(axis) - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.radius_in(near, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_in(far, q, r2, out);
                }
            }
        }
    }
}

/// Greedy max-min subset selection starting at `seed_id`.
///
/// Returns all ids in order when `k >= cloud.len()`. Among equally far
/// candidates the lowest id wins; already chosen points are never repeated.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, seed_id: usize) -> Vec<usize> {
    let n = cloud.len();
    if k >= n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let pts = cloud.points();
    let mut min_d: Vec<f64> = pts.iter().map(|p| p.dist2(pts[seed_id])).collect();
    let mut taken = vec![false; n];
    taken[seed_id] = true;
    let mut selected = Vec::with_capacity(k);
    selected.push(seed_id);
    while selected.len() < k {
        let mut pick = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if !taken[i] && d > far {
                far = d;
                pick = i;
            }
        }
        taken[pick] = true;
        selected.push(pick);
        let p = pts[pick];
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = pts[i].dist2(p);
            if nd < *d {
                *d = nd;
            }
        }
    }
    selected
}

use alloc::vec::Vec;
use core::cmp::Ordering;

use super::{dist2, Point};
use crate::error::{Error, Result};

/// `M` rows of `k` neighbor indices, each row sorted by increasing distance
/// to its query with ties broken by the lower index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    neighbors: Vec<usize>,
}

impl NeighborIndex {
    pub fn from_rows(k: usize, neighbors: Vec<usize>) -> Result<Self> {
        if k == 0 || neighbors.len() % k != 0 || neighbors.is_empty() {
            return Err(Error::dims("neighbor index", &[k], &[neighbors.len()]));
        }
        Ok(NeighborIndex { k, neighbors })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn queries(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Flat `M × k` indices.
    pub fn indices(&self) -> &[usize] {
        &self.neighbors
    }

    /// For each (query, slot) the query's own row index, i.e. `[0;k] ++ [1;k] ++ ...`.
    pub fn query_rows(&self) -> Vec<usize> {
        (0..self.queries())
            .flat_map(|i| core::iter::repeat(i).take(self.k))
            .collect()
    }
}

#[inline]
fn key_cmp(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::config(alloc::format!(
            "k = {k} neighbors requested from {n} points"
        )));
    }
    Ok(())
}

/// Exhaustive kNN; the reference every accelerated path must reproduce.
pub fn knn_brute(points: &[Point], queries: &[Point], k: usize) -> Result<NeighborIndex> {
    check_k(points.len(), k)?;
    let mut out = Vec::with_capacity(queries.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for q in queries {
        cand.clear();
        cand.extend(points.iter().enumerate().map(|(i, p)| (dist2(q, p), i)));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, key_cmp);
        }
        let best = &mut cand[..k];
        best.sort_unstable_by(key_cmp);
        out.extend(best.iter().map(|&(_, i)| i));
    }
    NeighborIndex::from_rows(k, out)
}

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum KdNode {
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

/// A static 3-d tree over a borrowed point set.
#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Point],
    order: Vec<usize>,
    // points permuted into `order`, so leaves scan contiguous memory
    packed: Vec<Point>,
    nodes: Vec<KdNode>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Point]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            packed: Vec::new(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_range(0, points.len());
        }
        tree.packed = tree.order.iter().map(|&i| points[i]).collect();
        tree
    }

    fn build_range(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] <= 0.0 {
            // every point identical
            self.nodes.push(KdNode::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = pts[self.order[mid]][axis];
        let slot = self.nodes.len();
        self.nodes.push(KdNode::Leaf { start, end });
        let left = self.build_range(start, mid);
        let right = self.build_range(mid, end);
        self.nodes[slot] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    fn search(&self, node: usize, q: &Point, k: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                let mut worst = if best.len() == k {
                    best[k - 1].0
                } else {
                    f64::INFINITY
                };
                for (p, &i) in self.packed[start..end].iter().zip(&self.order[start..end]) {
                    let d = dist2(q, p);
                    if d > worst {
                        continue;
                    }
                    let cand = (d, i);
                    if best.len() < k || key_cmp(&cand, &best[best.len() - 1]) == Ordering::Less {
                        let pos = best
                            .binary_search_by(|probe| key_cmp(probe, &cand))
                            .unwrap_or_else(|p| p);
                        best.insert(pos, cand);
                        best.truncate(k);
                        if best.len() == k {
                            worst = best[k - 1].0;
                        }
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, best);
                // Equal distances must still be visited: a lower index may win the tie.
                if best.len() < k || diff * diff <= best[best.len() - 1].0 {
                    self.search(far, q, k, best);
                }
            }
        }
    }

    pub fn knn(&self, queries: &[Point], k: usize) -> Result<NeighborIndex> {
        check_k(self.points.len(), k)?;
        let mut out = Vec::with_capacity(queries.len() * k);
        let mut best = Vec::with_capacity(k + 1);
        for q in queries {
            best.clear();
            self.search(0, q, k, &mut best);
            out.extend(best.iter().map(|&(_, i)| i));
        }
        NeighborIndex::from_rows(k, out)
    }
}

/// Exact kNN, using the kd-tree when the point set is large enough to pay for it.
pub fn knn(points: &[Point], queries: &[Point], k: usize) -> Result<NeighborIndex> {
    if points.len() * queries.len() <= 4096 {
        knn_brute(points, queries, k)
    } else {
        KdTree::build(points).knn(queries, k)
    }
}

/// Neighbors of every point among the same set (each point includes itself).
pub fn knn_self(points: &[Point], k: usize) -> Result<NeighborIndex> {
    knn(points, points, k)
}

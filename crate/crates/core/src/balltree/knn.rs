use super::{dist2, BallTree};
use crate::error::{Error, Result};

/// Result of a neighbour search together with the number of point and ball
/// distance evaluations it needed.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub indices: Vec<usize>,
    pub evaluations: u64,
}

/// Flattened k-nearest-neighbour graph: row `i` holds the `k` neighbours of
/// point `i`, nearest first.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<usize>,
    pub evaluations: u64,
}

impl KnnGraph {
    pub fn of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn len(&self) -> usize {
        self.neighbors.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

struct Search<'a> {
    tree: &'a BallTree,
    query: &'a [f64],
    exclude: usize,
    k: usize,
    // sorted ascending by (distance², index)
    best: Vec<(f64, usize)>,
    evaluations: u64,
}

impl Search<'_> {
    fn bound(&self) -> f64 {
        if self.best.len() < self.k {
            f64::INFINITY
        } else {
            self.best[self.k - 1].0.sqrt()
        }
    }

    fn offer(&mut self, d2: f64, idx: usize) {
        let key = (d2, idx);
        if self.best.len() == self.k {
            let last = self.best[self.k - 1];
            if (key.0, key.1) >= (last.0, last.1) {
                return;
            }
            self.best.pop();
        }
        let at = self.best.partition_point(|&(d, i)| (d, i) < (key.0, key.1));
        self.best.insert(at, key);
    }

    fn lower_bound(&mut self, level: usize, ball: usize) -> f64 {
        let v = &self.tree.levels[level];
        let d = self.tree.dim;
        self.evaluations += 1;
        let dc = dist2(self.query, &v.centers[ball * d..(ball + 1) * d]).sqrt();
        (dc - v.radii[ball]).max(0.0)
    }

    fn visit(&mut self, level: usize, ball: usize) {
        if level == 0 {
            let p = self.tree.perm[ball];
            if p < self.tree.num_real && p != self.exclude {
                let d = self.tree.dim;
                let c = &self.tree.levels[0].centers[ball * d..(ball + 1) * d];
                self.evaluations += 1;
                let d2 = dist2(self.query, c);
                self.offer(d2, p);
            }
            return;
        }
        let (l, r) = (2 * ball, 2 * ball + 1);
        let counts = &self.tree.levels[level - 1].counts;
        let (cl, cr) = (counts[l], counts[r]);
        let bl = if cl > 0 {
            self.lower_bound(level - 1, l)
        } else {
            f64::INFINITY
        };
        let br = if cr > 0 {
            self.lower_bound(level - 1, r)
        } else {
            f64::INFINITY
        };
        let order = if bl <= br {
            [(l, bl), (r, br)]
        } else {
            [(r, br), (l, bl)]
        };
        for (child, lb) in order {
            // slack keeps equal-distance candidates that rounding might push
            // just outside the bound
            if lb.is_finite() && lb <= self.bound() * (1.0 + 1e-10) + 1e-300 {
                self.visit(level - 1, child);
            }
        }
    }
}

impl BallTree {
    /// Indices of the `k` nearest real points to point `query_index`,
    /// excluding the query itself. Distances are Euclidean in the tree's
    /// frame; ties go to the lower original index.
    pub fn knn(&self, query_index: usize, k: usize) -> Result<Vec<usize>> {
        Ok(self.knn_with_stats(query_index, k)?.indices)
    }

    pub fn knn_with_stats(&self, query_index: usize, k: usize) -> Result<Neighbors> {
        if query_index >= self.num_real {
            return Err(Error::Range(format!(
                "query {query_index} outside {} points",
                self.num_real
            )));
        }
        if k == 0 || k >= self.num_real {
            return Err(Error::Argument(format!(
                "k = {k} must satisfy 1 ≤ k < n = {}",
                self.num_real
            )));
        }
        let d = self.dim;
        let slot = self.inv_perm[query_index];
        let query = &self.levels[0].centers[slot * d..(slot + 1) * d];
        let mut s = Search {
            tree: self,
            query,
            exclude: query_index,
            k,
            best: Vec::with_capacity(k + 1),
            evaluations: 0,
        };
        s.visit(self.depth, 0);
        Ok(Neighbors {
            indices: s.best.iter().map(|&(_, i)| i).collect(),
            evaluations: s.evaluations,
        })
    }

    /// k-nearest-neighbour lists for every point.
    pub fn knn_graph(&self, k: usize) -> Result<KnnGraph> {
        let mut neighbors = Vec::with_capacity(self.num_real * k);
        let mut evaluations = 0;
        for i in 0..self.num_real {
            let r = self.knn_with_stats(i, k)?;
            neighbors.extend_from_slice(&r.indices);
            evaluations += r.evaluations;
        }
        Ok(KnnGraph {
            k,
            neighbors,
            evaluations,
        })
    }
}

//! Perfect ball trees with contiguous leaf storage.
//!
//! A tree over `n` points has depth `m = ceil(log2 n)` and `2^m` leaf slots.
//! Slot `j` holds original point `perm[j]`, or the sentinel `n` when the slot
//! is virtual padding. Ball `b` at level `i` owns exactly the slots
//! `[b·2^i, (b+1)·2^i)`, so every level is a plain reshape of the leaf array.
//!
//! Construction splits along the axis of largest spread at the median count.
//! Virtual slots are reserved up front: a ball of `S` slots holding `r` real
//! points hands `ceil(r/2)` of them to its left child and `floor(r/2)` to its
//! right child, each child getting `S/2` slots. Because the root holds more
//! than `S/2` real points, every ball above the leaves keeps at least one real
//! point and every virtual leaf has a real sibling.

mod knn;
mod rotation;

use std::fmt::Write as _;
use std::ops::Range;

pub use knn::{KnnGraph, Neighbors};
pub use rotation::RotationSpec;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// A single ball at some level of the tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
    /// Number of real points inside the ball.
    pub point_count: usize,
}

#[derive(Clone, Debug)]
struct Level {
    centers: Vec<f64>,
    radii: Vec<f64>,
    counts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BallTree {
    dim: usize,
    depth: usize,
    num_real: usize,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    valid: Vec<bool>,
    levels: Vec<Level>,
    build_visits: u64,
}

/// Zero-copy view of one tree level.
#[derive(Clone, Copy, Debug)]
pub struct LevelSlice<'a> {
    pub level: usize,
    pub ball_size: usize,
    pub ball_count: usize,
    pub dim: usize,
    pub centers: &'a [f64],
    pub radii: &'a [f64],
    pub counts: &'a [usize],
}

impl<'a> LevelSlice<'a> {
    pub fn slot_range(&self, ball: usize) -> Range<usize> {
        ball * self.ball_size..(ball + 1) * self.ball_size
    }

    pub fn center(&self, ball: usize) -> &'a [f64] {
        &self.centers[ball * self.dim..(ball + 1) * self.dim]
    }

    pub fn ball(&self, b: usize) -> Ball {
        Ball {
            center: self.center(b).to_vec(),
            radius: self.radii[b],
            point_count: self.counts[b],
        }
    }
}

impl BallTree {
    /// Builds a tree over the rows of a `[n × dim]` position matrix.
    pub fn build(positions: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || positions.is_empty() || !positions.len().is_multiple_of(dim) {
            return Err(Error::Input(format!(
                "cannot build a tree from {} values in dimension {dim}",
                positions.len()
            )));
        }
        if let Some(i) = positions.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite coordinate at point {}", i / dim)));
        }
        let n = positions.len() / dim;
        let depth = depth_for(n);
        let slots = 1usize << depth;

        let mut builder = Builder {
            points: positions,
            dim,
            perm: vec![n; slots],
            visits: 0,
            lo: vec![0.0; dim],
            hi: vec![0.0; dim],
        };
        let mut idx: Vec<usize> = (0..n).collect();
        builder.split(&mut idx, 0, slots);
        let Builder { perm, visits, .. } = builder;

        let mut inv_perm = vec![0; n];
        let valid: Vec<bool> = perm.iter().map(|&p| p < n).collect();
        for (slot, &p) in perm.iter().enumerate() {
            if p < n {
                inv_perm[p] = slot;
            }
        }

        let mut tree = BallTree {
            dim,
            depth,
            num_real: n,
            perm,
            inv_perm,
            valid,
            levels: Vec::with_capacity(depth + 1),
            build_visits: visits,
        };
        tree.compute_levels(positions);
        Ok(tree)
    }

    /// Builds a tree for the first point set of `cloud`.
    pub fn from_cloud(cloud: &PointCloud) -> Result<Self> {
        let v = cloud.batch(0);
        Self::build(v.positions, v.dim)
    }

    /// One tree per point set in the batch.
    pub fn build_batch(cloud: &PointCloud) -> Result<Vec<Self>> {
        (0..cloud.batch_len())
            .map(|b| {
                let v = cloud.batch(b);
                Self::build(v.positions, v.dim)
            })
            .collect()
    }

    /// Builds a tree on rotated coordinates.
    ///
    /// The permutation still refers to the original point indices while
    /// centers and radii live in the rotated frame.
    pub fn build_rotated(positions: &[f64], dim: usize, rot: &RotationSpec) -> Result<Self> {
        let rotated = rot.apply(positions, dim)?;
        Self::build(&rotated, dim)
    }

    fn compute_levels(&mut self, positions: &[f64]) {
        let d = self.dim;
        let slots = self.perm.len();

        // leaves: real slots copy their point, virtual slots copy the last real
        // point of the smallest enclosing ball that has one
        let mut centers = vec![0.0; slots * d];
        let mut counts = vec![0usize; slots];
        for (j, &p) in self.perm.iter().enumerate() {
            if p < self.num_real {
                centers[j * d..(j + 1) * d].copy_from_slice(&positions[p * d..(p + 1) * d]);
                counts[j] = 1;
            }
        }
        for j in 0..slots {
            if counts[j] == 0 {
                let src = self.virtual_source(j);
                let p = self.perm[src];
                centers[j * d..(j + 1) * d].copy_from_slice(&positions[p * d..(p + 1) * d]);
            }
        }
        self.levels.push(Level {
            centers,
            radii: vec![0.0; slots],
            counts,
        });

        for i in 1..=self.depth {
            let prev = &self.levels[i - 1];
            let count = slots >> i;
            let mut centers = vec![0.0; count * d];
            let mut counts = vec![0usize; count];
            for b in 0..count {
                let (l, r) = (2 * b, 2 * b + 1);
                let (nl, nr) = (prev.counts[l], prev.counts[r]);
                counts[b] = nl + nr;
                let c = &mut centers[b * d..(b + 1) * d];
                // identical children (or an empty side) keep the center
                // exactly, so coincident points give a radius of exactly 0
                let same = prev.centers[l * d..(l + 1) * d] == prev.centers[r * d..(r + 1) * d];
                if nl + nr == 0 || nr == 0 || same {
                    c.copy_from_slice(&prev.centers[l * d..(l + 1) * d]);
                    continue;
                }
                if nl == 0 {
                    c.copy_from_slice(&prev.centers[r * d..(r + 1) * d]);
                    continue;
                }
                let (wl, wr) = (nl as f64, nr as f64);
                let total = wl + wr;
                for (k, ck) in c.iter_mut().enumerate() {
                    *ck = (wl * prev.centers[l * d + k] + wr * prev.centers[r * d + k]) / total;
                }
            }
            let size = 1usize << i;
            let mut radii = vec![0.0; count];
            for b in 0..count {
                let c = &centers[b * d..(b + 1) * d];
                let mut r2: f64 = 0.0;
                for j in b * size..(b + 1) * size {
                    let p = self.perm[j];
                    if p < self.num_real {
                        r2 = r2.max(dist2(c, &positions[p * d..(p + 1) * d]));
                    }
                }
                radii[b] = r2.sqrt();
            }
            self.build_visits += (slots * d) as u64;
            self.levels.push(Level { centers, radii, counts });
        }
    }

    fn virtual_source(&self, slot: usize) -> usize {
        for i in 1..=self.depth {
            let size = 1usize << i;
            let lo = slot / size * size;
            if let Some(j) = (lo..lo + size).rev().find(|&j| self.valid[j]) {
                return j;
            }
        }
        unreachable!("a tree always holds at least one real point")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Depth `m`; the tree has levels `0..=m`.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_real(&self) -> usize {
        self.num_real
    }

    pub fn num_slots(&self) -> usize {
        self.perm.len()
    }

    /// Slot → original index, with sentinel `num_real()` for virtual slots.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Original index → slot.
    pub fn inv_perm(&self) -> &[usize] {
        &self.inv_perm
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    /// Abstract construction work: element visits during splitting plus the
    /// radius scans.
    pub fn build_visits(&self) -> u64 {
        self.build_visits
    }

    pub fn level_view(&self, i: usize) -> Result<LevelSlice<'_>> {
        let level = self
            .levels
            .get(i)
            .ok_or_else(|| Error::Range(format!("level {i} outside tree of depth {}", self.depth)))?;
        Ok(LevelSlice {
            level: i,
            ball_size: 1 << i,
            ball_count: self.perm.len() >> i,
            dim: self.dim,
            centers: &level.centers,
            radii: &level.radii,
            counts: &level.counts,
        })
    }

    /// Leaf positions in slot order (virtual slots hold their copy).
    pub fn leaf_positions(&self) -> &[f64] {
        &self.levels[0].centers
    }

    /// Maps each slot of `other` to a slot of `self` holding the same point.
    ///
    /// Virtual slots of `other` are matched to virtual slots of `self` in
    /// increasing order, so the result is a bijection on slots.
    pub fn relative_permutation(&self, other: &BallTree) -> Result<Vec<usize>> {
        if other.num_real != self.num_real || other.perm.len() != self.perm.len() {
            return Err(Error::Shape(format!(
                "trees over {} and {} points cannot be related",
                self.num_real, other.num_real
            )));
        }
        let mut spare = self.valid.iter().enumerate().filter(|(_, &v)| !v).map(|(j, _)| j);
        other
            .perm
            .iter()
            .map(|&p| {
                if p < self.num_real {
                    Ok(self.inv_perm[p])
                } else {
                    spare
                        .next()
                        .ok_or_else(|| Error::Shape("virtual slot counts differ".into()))
                }
            })
            .collect()
    }

    /// Reorders `[n × width]` rows into slot order; virtual slots get zeros.
    pub fn gather<T: Copy + Default>(&self, values: &[T], width: usize) -> Result<Vec<T>> {
        if values.len() != self.num_real * width {
            return Err(Error::Shape(format!(
                "gather expects [{} × {width}], got {} values",
                self.num_real,
                values.len()
            )));
        }
        let mut out = vec![T::default(); self.perm.len() * width];
        for (j, &p) in self.perm.iter().enumerate() {
            if p < self.num_real {
                out[j * width..(j + 1) * width].copy_from_slice(&values[p * width..(p + 1) * width]);
            }
        }
        Ok(out)
    }

    /// Inverse of [`gather`](Self::gather): keeps real slots in original order.
    pub fn scatter<T: Copy>(&self, slot_values: &[T], width: usize) -> Result<Vec<T>> {
        if slot_values.len() != self.perm.len() * width {
            return Err(Error::Shape(format!(
                "scatter expects [{} × {width}], got {} values",
                self.perm.len(),
                slot_values.len()
            )));
        }
        let mut out = Vec::with_capacity(self.num_real * width);
        for &j in &self.inv_perm {
            out.extend_from_slice(&slot_values[j * width..(j + 1) * width]);
        }
        Ok(out)
    }

    /// Text dump, one line per level: `center… radius [lo,hi)` per ball.
    pub fn debug_dump(&self) -> String {
        let mut s = String::new();
        for i in 0..=self.depth {
            let v = self.level_view(i).expect("level within depth");
            let _ = write!(s, "level {i}:");
            for b in 0..v.ball_count {
                let r = v.slot_range(b);
                let _ = write!(s, "{}", if b == 0 { " " } else { " | " });
                for c in v.center(b) {
                    let _ = write!(s, "{c:.6} ");
                }
                let _ = write!(s, "{:.6} [{},{})", v.radii[b], r.start, r.end);
            }
            s.push('\n');
        }
        s
    }
}

pub(crate) fn depth_for(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Builder<'a> {
    points: &'a [f64],
    dim: usize,
    perm: Vec<usize>,
    visits: u64,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Builder<'_> {
    fn split(&mut self, idx: &mut [usize], slot_lo: usize, slots: usize) {
        let r = idx.len();
        debug_assert!(r <= slots);
        if slots == 1 {
            if r == 1 {
                self.perm[slot_lo] = idx[0];
            }
            return;
        }
        if r == 0 {
            return;
        }
        let half = slots / 2;
        let left = r.div_ceil(2);
        if r > 1 {
            let axis = self.widest_axis(idx);
            let (pts, d) = (self.points, self.dim);
            // ties resolved by original index so the split is fully determined
            idx.select_nth_unstable_by(left, |&a, &b| {
                pts[a * d + axis].total_cmp(&pts[b * d + axis]).then(a.cmp(&b))
            });
            self.visits += r as u64;
        }
        let (l, rr) = idx.split_at_mut(left);
        self.split(l, slot_lo, half);
        self.split(rr, slot_lo + half, half);
    }

    fn widest_axis(&mut self, idx: &[usize]) -> usize {
        let d = self.dim;
        self.lo.fill(f64::INFINITY);
        self.hi.fill(f64::NEG_INFINITY);
        for &i in idx {
            let p = &self.points[i * d..(i + 1) * d];
            for (k, &v) in p.iter().enumerate() {
                self.lo[k] = self.lo[k].min(v);
                self.hi[k] = self.hi[k].max(v);
            }
        }
        self.visits += (idx.len() * d) as u64;
        let mut best = 0;
        for k in 1..d {
            if self.hi[k] - self.lo[k] > self.hi[best] - self.lo[best] {
                best = k;
            }
        }
        best
    }
}

//! Slow, direct implementations used as test oracles.
//!
//! Nothing here is used by the network itself. Each routine recomputes its
//! result from first principles (full pairwise scans, dense masked attention)
//! so that it shares as little code as possible with the fast paths.

use crate::attention::BallAttentionConfig;
use crate::balltree::BallTree;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Dense multi-head attention over all slots with an additive mask that
/// restricts every query to the valid keys of its own ball.
///
/// `x` is `[slots × C]`; weights are read from `store` under `prefix` with
/// the same names as [`BallAttentionConfig::init_params`]. The relative
/// position embedding and the distance bias are evaluated slot by slot.
pub fn dense_ball_attention(
    x: &Tensor<f64>,
    positions: &[f64],
    valid: &[bool],
    dim: usize,
    cfg: &BallAttentionConfig,
    store: &ParamStore,
    prefix: &str,
) -> Result<Tensor<f64>> {
    let n = valid.len();
    let b = cfg.ball_size;
    if x.shape() != [n, cfg.dim] || positions.len() != n * dim || !n.is_multiple_of(b) {
        return Err(Error::Shape(format!(
            "reference attention: x {:?}, {} coordinates, {n} slots, ball {b}",
            x.shape(),
            positions.len()
        )));
    }
    let w = |s: &str| store.get(&format!("{prefix}.{s}"));
    let sigma = w("sigma")?.data().to_vec();

    // relative positions: each valid slot minus the mean of the valid slots
    // sharing its ball
    let mut rel = vec![0.0; n * dim];
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        let ball = i / b;
        let members: Vec<usize> = (0..n).filter(|&j| j / b == ball && valid[j]).collect();
        for a in 0..dim {
            let mean = members.iter().map(|&j| positions[j * dim + a]).sum::<f64>() / members.len() as f64;
            rel[i * dim + a] = positions[i * dim + a] - mean;
        }
    }

    let tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let relv = tape.constant(Tensor::new(&[n, dim], rel)?);
    let h = xv.add(&relv.matmul(&tape.constant(w("w_pos")?.clone()))?)?;
    let q = h.matmul(&tape.constant(w("w_q")?.clone()))?;
    let k = h.matmul(&tape.constant(w("w_k")?.clone()))?;
    let v = h.matmul(&tape.constant(w("w_v")?.clone()))?;
    let dh = cfg.inner / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads: Vec<Var<'_, f64>> = Vec::with_capacity(cfg.heads);
    for (hh, sg) in sigma.iter().enumerate() {
        let qh = q.slice_last(hh * dh, (hh + 1) * dh)?;
        let kh = k.slice_last(hh * dh, (hh + 1) * dh)?;
        let vh = v.slice_last(hh * dh, (hh + 1) * dh)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;
        let s2 = sg * sg;
        let mut mask = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            for j in 0..n {
                if i / b == j / b && valid[i] && valid[j] {
                    let d2: f64 = (0..dim)
                        .map(|a| (positions[i * dim + a] - positions[j * dim + a]).powi(2))
                        .sum();
                    mask[i * n + j] = -s2 * d2.sqrt();
                }
            }
        }
        let probs = scores.softmax_last(Some(&Tensor::new(&[n, n], mask)?))?.probs;
        heads.push(probs.matmul(&vh)?);
    }
    let out = Var::concat(&heads)?.matmul(&tape.constant(w("w_o")?.clone()))?;
    Ok(out.to_tensor())
}

/// The `k` nearest points to `query` (excluding it) by a full scan, ordered
/// by distance and then by index.
pub fn knn_linear_scan(positions: &[f64], dim: usize, query: usize, k: usize) -> Vec<usize> {
    let n = positions.len() / dim;
    let q = &positions[query * dim..(query + 1) * dim];
    let mut all: Vec<(f64, usize)> = (0..n)
        .filter(|&j| j != query)
        .map(|j| {
            let d2: f64 = q
                .iter()
                .zip(&positions[j * dim..(j + 1) * dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d2, j)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Absolute slack for geometric comparisons.
pub const TREE_TOL: f64 = 1e-9;

/// Verifies every structural and geometric invariant of `tree` over the
/// original `positions` by exhaustive scans. Returns a description of the
/// first violation.
pub fn check_tree_invariants(tree: &BallTree, positions: &[f64]) -> std::result::Result<(), String> {
    let d = tree.dim();
    let n = positions.len() / d;
    let m = tree.depth();
    let slots = tree.num_slots();
    if tree.num_real() != n {
        return Err(format!("tree holds {} points, cloud has {n}", tree.num_real()));
    }
    // completion: 2^(m-1) < n ≤ 2^m
    if slots != 1 << m || n > slots || (m > 0 && n <= slots / 2) {
        return Err(format!("depth {m} with {slots} slots does not fit n = {n}"));
    }
    // permutation: valid slots biject onto 0..n, virtual slots hold n
    let mut seen = vec![false; n];
    for (j, &p) in tree.perm().iter().enumerate() {
        let valid = tree.valid_mask()[j];
        if valid != (p < n) {
            return Err(format!("slot {j}: validity {valid} but perm {p}"));
        }
        if p < n {
            if seen[p] {
                return Err(format!("point {p} stored twice"));
            }
            seen[p] = true;
            if tree.inv_perm()[p] != j {
                return Err(format!(
                    "inv_perm[{p}] = {} but point sits at slot {j}",
                    tree.inv_perm()[p]
                ));
            }
        } else if p != n {
            return Err(format!("virtual slot {j} holds {p}, expected sentinel {n}"));
        }
    }
    if let Some(p) = seen.iter().position(|s| !s) {
        return Err(format!("point {p} missing from the leaves"));
    }
    for i in 0..=m {
        let view = tree.level_view(i).map_err(|e| e.to_string())?;
        let size = 1usize << i;
        if view.ball_count != slots >> i || view.ball_size != size {
            return Err(format!(
                "level {i}: {} balls of {} slots",
                view.ball_count, view.ball_size
            ));
        }
        for b in 0..view.ball_count {
            let range = view.slot_range(b);
            if range != (b * size..(b + 1) * size) {
                return Err(format!("level {i} ball {b}: slots {range:?}"));
            }
            let members: Vec<usize> = range
                .clone()
                .filter_map(|j| tree.perm().get(j).copied().filter(|&p| p < n))
                .collect();
            if view.counts[b] != members.len() {
                return Err(format!(
                    "level {i} ball {b}: count {} but {} members",
                    view.counts[b],
                    members.len()
                ));
            }
            let c = view.center(b);
            let r = view.radii[b];
            if members.is_empty() {
                if i > 0 {
                    return Err(format!("level {i} ball {b} holds no real point"));
                }
                continue;
            }
            // center of mass of the real members
            for a in 0..d {
                let mean = members.iter().map(|&p| positions[p * d + a]).sum::<f64>() / members.len() as f64;
                if (mean - c[a]).abs() > TREE_TOL * (1.0 + mean.abs()) {
                    return Err(format!("level {i} ball {b}: center[{a}] {} vs mean {mean}", c[a]));
                }
            }
            // radius equals the largest member distance and covers every member
            let far = members
                .iter()
                .map(|&p| {
                    (0..d)
                        .map(|a| (positions[p * d + a] - c[a]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max);
            if r < 0.0 || (far - r).abs() > TREE_TOL {
                return Err(format!("level {i} ball {b}: radius {r} vs farthest member {far}"));
            }
            let distinct = members
                .iter()
                .any(|&p| (0..d).any(|a| positions[p * d + a] != positions[members[0] * d + a]));
            if (r == 0.0) == distinct {
                return Err(format!(
                    "level {i} ball {b}: radius {r} with distinct points = {distinct}"
                ));
            }
        }
    }
    Ok(())
}

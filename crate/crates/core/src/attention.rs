//! Ball-restricted multi-head self-attention.
//!
//! Slots are grouped into consecutive balls of `ball_size` rows; attention is
//! computed independently inside each ball with weights shared across balls.
//! Before projection every valid slot receives a relative position embedding
//! `(p − c_B)·W_pos`, where `c_B` is the mean position of the valid slots of
//! its ball. Scores receive an additive per-head bias `−σ_h²·‖p_i − p_j‖₂`
//! after the `1/√(C′/H)` scaling. Virtual slots are masked: they neither
//! attend nor are attended to, and their attention outputs are zero.

use crate::error::{Error, Result};
use crate::numerics::params::Bindings;
use crate::numerics::{ball_attention, ParamStore, Real, Tensor, Var};

/// Shape of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BallAttentionConfig {
    pub ball_size: usize,
    pub heads: usize,
    /// Model width `C`.
    pub dim: usize,
    /// Inner width `C′` shared by all heads.
    pub inner: usize,
    /// Spatial dimension of positions.
    pub space_dim: usize,
}

impl BallAttentionConfig {
    pub fn new(ball_size: usize, heads: usize, dim: usize, space_dim: usize) -> Self {
        BallAttentionConfig {
            ball_size,
            heads,
            dim,
            inner: dim,
            space_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.inner.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "inner width {} is not divisible by {} heads",
                self.inner, self.heads
            )));
        }
        if !self.ball_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "ball size {} is not a power of two",
                self.ball_size
            )));
        }
        if self.dim == 0 || self.space_dim == 0 {
            return Err(Error::Config("attention widths must be positive".into()));
        }
        Ok(())
    }

    /// Adds `prefix.{w_q,w_k,w_v,w_o,w_pos,sigma}` to `store`.
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        self.validate()?;
        store.add_weight(&format!("{prefix}.w_q"), self.dim, self.inner)?;
        store.add_weight(&format!("{prefix}.w_k"), self.dim, self.inner)?;
        store.add_weight(&format!("{prefix}.w_v"), self.dim, self.inner)?;
        store.add_weight(&format!("{prefix}.w_o"), self.inner, self.dim)?;
        store.add_weight(&format!("{prefix}.w_pos"), self.space_dim, self.dim)?;
        store.add_constant(&format!("{prefix}.sigma"), &[self.heads], 1.0)
    }

    /// Number of scalars added by [`init_params`](Self::init_params).
    pub fn param_count(&self) -> usize {
        4 * self.dim * self.inner + self.space_dim * self.dim + self.heads
    }
}

/// Attention weights bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'t, T: Real> {
    pub w_q: Var<'t, T>,
    pub w_k: Var<'t, T>,
    pub w_v: Var<'t, T>,
    pub w_o: Var<'t, T>,
    pub w_pos: Var<'t, T>,
    pub sigma: Var<'t, T>,
}

impl<'t, T: Real> AttentionParams<'t, T> {
    pub fn bind(b: &Bindings<'t, T>, prefix: &str) -> Result<Self> {
        Ok(AttentionParams {
            w_q: b.get(&format!("{prefix}.w_q"))?,
            w_k: b.get(&format!("{prefix}.w_k"))?,
            w_v: b.get(&format!("{prefix}.w_v"))?,
            w_o: b.get(&format!("{prefix}.w_o"))?,
            w_pos: b.get(&format!("{prefix}.w_pos"))?,
            sigma: b.get(&format!("{prefix}.sigma"))?,
        })
    }
}

/// Geometry of the current leaf level in slot order.
#[derive(Clone, Copy, Debug)]
pub struct SlotGeometry<'a> {
    /// `[slots × d]` positions.
    pub positions: &'a [f64],
    /// Real (`true`) or virtual (`false`) per slot.
    pub valid: &'a [bool],
    pub dim: usize,
}

impl SlotGeometry<'_> {
    pub fn slots(&self) -> usize {
        self.valid.len()
    }

    fn check(&self, ball_size: usize) -> Result<()> {
        if self.positions.len() != self.valid.len() * self.dim {
            return Err(Error::Shape(format!(
                "{} coordinates for {} slots in dimension {}",
                self.positions.len(),
                self.valid.len(),
                self.dim
            )));
        }
        if ball_size == 0 || !self.slots().is_multiple_of(ball_size) {
            return Err(Error::Shape(format!(
                "ball size {ball_size} does not divide {} slots",
                self.slots()
            )));
        }
        Ok(())
    }
}

/// Mean position of the valid slots of every ball, `[balls × d]`. A ball with
/// no valid slot gets the origin.
pub fn ball_centers(geo: &SlotGeometry<'_>, ball_size: usize) -> Result<Vec<f64>> {
    geo.check(ball_size)?;
    let d = geo.dim;
    let nb = geo.slots() / ball_size;
    let mut centers = vec![0.0; nb * d];
    for b in 0..nb {
        let mut count = 0usize;
        for s in b * ball_size..(b + 1) * ball_size {
            if geo.valid[s] {
                count += 1;
                for a in 0..d {
                    centers[b * d + a] += geo.positions[s * d + a];
                }
            }
        }
        if count > 0 {
            for a in 0..d {
                centers[b * d + a] /= count as f64;
            }
        }
    }
    Ok(centers)
}

/// `[slots × d]` offsets `p − c_B` for valid slots, zero rows for virtual ones.
pub fn relative_positions(geo: &SlotGeometry<'_>, ball_size: usize) -> Result<Vec<f64>> {
    let centers = ball_centers(geo, ball_size)?;
    let d = geo.dim;
    let mut rel = vec![0.0; geo.positions.len()];
    for s in 0..geo.slots() {
        if geo.valid[s] {
            let b = s / ball_size;
            for a in 0..d {
                rel[s * d + a] = geo.positions[s * d + a] - centers[b * d + a];
            }
        }
    }
    Ok(rel)
}

/// `x + (p − c_B)·W_pos` per slot; virtual slots receive no injection.
pub fn rpe_inject<'t, T: Real>(
    x: &Var<'t, T>,
    geo: &SlotGeometry<'_>,
    ball_size: usize,
    w_pos: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let rel = relative_positions(geo, ball_size)?;
    let rel = x.tape().constant(Tensor::from_f64(&[geo.slots(), geo.dim], &rel)?);
    x.add(&rel.matmul(w_pos)?)
}

/// Pairwise Euclidean distances between slots of each ball, `[balls × b × b]`.
pub fn ball_distances(geo: &SlotGeometry<'_>, ball_size: usize) -> Result<Vec<f64>> {
    geo.check(ball_size)?;
    let d = geo.dim;
    let nb = geo.slots() / ball_size;
    let mut out = vec![0.0; nb * ball_size * ball_size];
    for b in 0..nb {
        for i in 0..ball_size {
            let pi = &geo.positions[(b * ball_size + i) * d..(b * ball_size + i + 1) * d];
            for j in 0..ball_size {
                let pj = &geo.positions[(b * ball_size + j) * d..(b * ball_size + j + 1) * d];
                let d2: f64 = pi.iter().zip(pj).map(|(x, y)| (x - y) * (x - y)).sum();
                out[(b * ball_size + i) * ball_size + j] = d2.sqrt();
            }
        }
    }
    Ok(out)
}

/// Per-head distance bias `−σ_h²·‖p_i − p_j‖₂`, `[balls × H × b × b]`.
///
/// Entries involving virtual slots are finite here; they are excluded by the
/// mask from [`virtual_mask`] (or by the validity mask of the fused kernel).
pub fn distance_bias<'t, T: Real>(geo: &SlotGeometry<'_>, ball_size: usize, sigma: &Var<'t, T>) -> Result<Var<'t, T>> {
    let dist = ball_distances(geo, ball_size)?;
    let nb = geo.slots() / ball_size;
    sigma.distance_bias(&Tensor::from_f64(&[nb, ball_size, ball_size], &dist)?)
}

/// Additive `[balls × b × b]` mask: `−∞` wherever the query or the key is a
/// virtual slot, zero elsewhere.
pub fn virtual_mask<T: Real>(valid: &[bool], ball_size: usize) -> Result<Tensor<T>> {
    if ball_size == 0 || !valid.len().is_multiple_of(ball_size) {
        return Err(Error::Shape(format!(
            "ball size {ball_size} does not divide {} slots",
            valid.len()
        )));
    }
    let nb = valid.len() / ball_size;
    let mut data = Vec::with_capacity(nb * ball_size * ball_size);
    for b in 0..nb {
        for i in 0..ball_size {
            for j in 0..ball_size {
                let ok = valid[b * ball_size + i] && valid[b * ball_size + j];
                data.push(if ok { T::zero() } else { T::neg_infinity() });
            }
        }
    }
    Tensor::new(&[nb, ball_size, ball_size], data)
}

/// Result of an attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput<'t, T: Real> {
    pub out: Var<'t, T>,
    /// Query rows with nothing to attend to (the virtual slots).
    pub empty_rows: usize,
}

/// Multi-head self-attention inside each ball of `x: [slots × C]`.
pub fn ball_mhsa<'t, T: Real>(
    x: &Var<'t, T>,
    geo: &SlotGeometry<'_>,
    cfg: &BallAttentionConfig,
    p: &AttentionParams<'t, T>,
) -> Result<AttentionOutput<'t, T>> {
    cfg.validate()?;
    geo.check(cfg.ball_size)?;
    let shape = x.shape();
    if shape != [geo.slots(), cfg.dim] {
        return Err(Error::Shape(format!(
            "attention input {shape:?} for {} slots of width {}",
            geo.slots(),
            cfg.dim
        )));
    }
    let h = rpe_inject(x, geo, cfg.ball_size, &p.w_pos)?;
    let q = h.matmul(&p.w_q)?;
    let k = h.matmul(&p.w_k)?;
    let v = h.matmul(&p.w_v)?;
    let bias = distance_bias(geo, cfg.ball_size, &p.sigma)?;
    let (att, empty_rows) = ball_attention(&q, &k, &v, Some(&bias), geo.valid, cfg.heads, cfg.ball_size)?;
    Ok(AttentionOutput {
        out: att.matmul(&p.w_o)?,
        empty_rows,
    })
}

/// Inverse of a slot permutation.
pub fn invert_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    let mut inv = vec![usize::MAX; perm.len()];
    for (j, &i) in perm.iter().enumerate() {
        if i >= perm.len() || inv[i] != usize::MAX {
            return Err(Error::Input("slot map is not a permutation".into()));
        }
        inv[i] = j;
    }
    Ok(inv)
}

/// Applies a slot permutation to per-slot rows: row `j` of the result is row
/// `perm[j]` of `values`.
pub fn permute_rows<V: Copy>(values: &[V], width: usize, perm: &[usize]) -> Vec<V> {
    perm.iter()
        .flat_map(|&i| values[i * width..(i + 1) * width].iter().copied())
        .collect()
}

/// Ball attention under a second partition: rows are permuted with `perm_rot`
/// (rotated slot `j` holds original slot `perm_rot[j]`), attended, and
/// permuted back.
pub fn cross_ball_mhsa<'t, T: Real>(
    x: &Var<'t, T>,
    geo: &SlotGeometry<'_>,
    perm_rot: &[usize],
    cfg: &BallAttentionConfig,
    p: &AttentionParams<'t, T>,
) -> Result<AttentionOutput<'t, T>> {
    if perm_rot.len() != geo.slots() {
        return Err(Error::Shape(format!(
            "rotated slot map has {} entries for {} slots",
            perm_rot.len(),
            geo.slots()
        )));
    }
    let inv = invert_permutation(perm_rot)?;
    let positions = permute_rows(geo.positions, geo.dim, perm_rot);
    let valid = permute_rows(geo.valid, 1, perm_rot);
    let rot_geo = SlotGeometry {
        positions: &positions,
        valid: &valid,
        dim: geo.dim,
    };
    let xr = x.gather_rows(perm_rot)?;
    let res = ball_mhsa(&xr, &rot_geo, cfg, p)?;
    Ok(AttentionOutput {
        out: res.out.gather_rows(&inv)?,
        empty_rows: res.empty_rows,
    })
}

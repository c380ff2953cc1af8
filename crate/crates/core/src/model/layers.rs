//! Network components: message-passing embedding, transformer block,
//! coarsening and refinement.

use crate::attention::{ball_mhsa, cross_ball_mhsa, AttentionParams, BallAttentionConfig, SlotGeometry};
use crate::error::{Error, Result};
use crate::numerics::nn::{mlp2, swiglu};
use crate::numerics::params::Bindings;
use crate::numerics::{Real, Tensor, Var};

/// Weights of one message-passing step.
#[derive(Clone, Copy, Debug)]
pub struct MpnnStepParams<'t, T: Real> {
    pub edge_w1: Var<'t, T>,
    pub edge_b1: Var<'t, T>,
    pub edge_w2: Var<'t, T>,
    pub edge_b2: Var<'t, T>,
    pub node_w1: Var<'t, T>,
    pub node_b1: Var<'t, T>,
    pub node_w2: Var<'t, T>,
    pub node_b2: Var<'t, T>,
}

impl<'t, T: Real> MpnnStepParams<'t, T> {
    pub fn bind(b: &Bindings<'t, T>, prefix: &str) -> Result<Self> {
        let g = |s: &str| b.get(&format!("{prefix}.{s}"));
        Ok(MpnnStepParams {
            edge_w1: g("edge.w1")?,
            edge_b1: g("edge.b1")?,
            edge_w2: g("edge.w2")?,
            edge_b2: g("edge.b2")?,
            node_w1: g("node.w1")?,
            node_b1: g("node.b1")?,
            node_w2: g("node.w2")?,
            node_b2: g("node.b2")?,
        })
    }
}

/// Directed edges `j → i` of a neighbourhood graph.
#[derive(Clone, Debug, Default)]
pub struct EdgeList {
    /// Receiving node `i` per edge.
    pub target: Vec<usize>,
    /// Sending node `j` per edge.
    pub source: Vec<usize>,
}

impl EdgeList {
    /// Edges from neighbour lists: `neighbors(i)` are the senders of `i`.
    pub fn from_lists<'a>(n: usize, neighbors: impl Fn(usize) -> &'a [usize]) -> Self {
        let mut e = EdgeList::default();
        for i in 0..n {
            for &j in neighbors(i) {
                e.target.push(i);
                e.source.push(j);
            }
        }
        e
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }
}

/// One message-passing step on `h: [n × H]`:
/// `m_ij = MLP_e([h_i, h_j, p_i − p_j])`, `m_i = Σ_j m_ij`,
/// `h_i ← MLP_h([h_i, m_i])`. Nodes without neighbours aggregate zero.
pub fn mpnn_step<'t, T: Real>(
    h: &Var<'t, T>,
    positions: &[f64],
    dim: usize,
    edges: &EdgeList,
    p: &MpnnStepParams<'t, T>,
) -> Result<Var<'t, T>> {
    let n = h.shape()[0];
    if positions.len() != n * dim {
        return Err(Error::Shape(format!(
            "{} coordinates for {n} nodes in dimension {dim}",
            positions.len()
        )));
    }
    if edges.source.iter().chain(&edges.target).any(|&i| i >= n) {
        return Err(Error::Range(format!("edge endpoint outside {n} nodes")));
    }
    let width = p.edge_w2.shape()[1];
    let agg = if edges.is_empty() {
        h.tape().constant(Tensor::zeros(&[n, width]))
    } else {
        let mut rel = Vec::with_capacity(edges.len() * dim);
        for (&i, &j) in edges.target.iter().zip(&edges.source) {
            for a in 0..dim {
                rel.push(positions[i * dim + a] - positions[j * dim + a]);
            }
        }
        let rel = h.tape().constant(Tensor::from_f64(&[edges.len(), dim], &rel)?);
        let hi = h.gather_rows(&edges.target)?;
        let hj = h.gather_rows(&edges.source)?;
        let msg_in = Var::concat(&[hi, hj, rel])?;
        let msg = mlp2(&msg_in, &p.edge_w1, &p.edge_b1, &p.edge_w2, &p.edge_b2)?;
        msg.index_add_rows(&edges.target, n)?
    };
    let upd_in = Var::concat(&[*h, agg])?;
    mlp2(&upd_in, &p.node_w1, &p.node_b1, &p.node_w2, &p.node_b2)
}

/// Weights of one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams<'t, T: Real> {
    pub ln1_gain: Var<'t, T>,
    pub ln1_bias: Var<'t, T>,
    pub attn: AttentionParams<'t, T>,
    pub ln2_gain: Var<'t, T>,
    pub ln2_bias: Var<'t, T>,
    pub ffn_w1: Var<'t, T>,
    pub ffn_w2: Var<'t, T>,
    pub ffn_w3: Var<'t, T>,
}

impl<'t, T: Real> BlockParams<'t, T> {
    pub fn bind(b: &Bindings<'t, T>, prefix: &str) -> Result<Self> {
        let g = |s: &str| b.get(&format!("{prefix}.{s}"));
        Ok(BlockParams {
            ln1_gain: g("ln1.gain")?,
            ln1_bias: g("ln1.bias")?,
            attn: AttentionParams::bind(b, &format!("{prefix}.attn"))?,
            ln2_gain: g("ln2.gain")?,
            ln2_bias: g("ln2.bias")?,
            ffn_w1: g("ffn.w1")?,
            ffn_w2: g("ffn.w2")?,
            ffn_w3: g("ffn.w3")?,
        })
    }
}

/// Pre-norm residual block:
/// `x ← x + Attn(LN(x))`, then `x ← x + SwiGLU(LN(x))`.
///
/// With `rot_perm` the attention runs on the rotated partition.
pub fn erwin_block<'t, T: Real>(
    x: &Var<'t, T>,
    geo: &SlotGeometry<'_>,
    rot_perm: Option<&[usize]>,
    cfg: &BallAttentionConfig,
    p: &BlockParams<'t, T>,
) -> Result<Var<'t, T>> {
    let h = x.layer_norm(&p.ln1_gain, &p.ln1_bias)?;
    let att = match rot_perm {
        Some(perm) => cross_ball_mhsa(&h, geo, perm, cfg, &p.attn)?,
        None => ball_mhsa(&h, geo, cfg, &p.attn)?,
    };
    let x = x.add(&att.out)?;
    let h = x.layer_norm(&p.ln2_gain, &p.ln2_bias)?;
    x.add(&swiglu(&h, &p.ffn_w1, &p.ffn_w2, &p.ffn_w3)?)
}

/// Features and geometry of the current leaf level.
#[derive(Clone, Debug)]
pub struct LevelState<'t, T: Real> {
    pub x: Var<'t, T>,
    pub geometry: LevelGeometry,
}

/// Slot positions and validity at one tree level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGeometry {
    /// Tree level (0 = leaves).
    pub level: usize,
    pub dim: usize,
    pub positions: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LevelGeometry {
    pub fn slots(&self) -> usize {
        self.valid.len()
    }

    pub fn view(&self) -> SlotGeometry<'_> {
        SlotGeometry {
            positions: &self.positions,
            valid: &self.valid,
            dim: self.dim,
        }
    }

    /// Geometry `l` levels up: each group of `2^l` slots becomes one slot at
    /// the mean position of its valid children, valid if any child is.
    pub fn coarsened(&self, l: usize) -> Result<LevelGeometry> {
        let g = 1usize << l;
        if g > self.slots() {
            return Err(Error::Range(format!(
                "coarsening by 2^{l} from level {} exceeds the tree depth ({} slots left)",
                self.level,
                self.slots()
            )));
        }
        let d = self.dim;
        let m = self.slots() / g;
        let mut positions = vec![0.0; m * d];
        let mut valid = vec![false; m];
        for b in 0..m {
            let mut count = 0usize;
            for s in b * g..(b + 1) * g {
                if self.valid[s] {
                    count += 1;
                    for a in 0..d {
                        positions[b * d + a] += self.positions[s * d + a];
                    }
                }
            }
            if count > 0 {
                valid[b] = true;
                for a in 0..d {
                    positions[b * d + a] /= count as f64;
                }
            } else {
                positions[b * d..(b + 1) * d].copy_from_slice(&self.positions[b * g * d..(b * g + 1) * d]);
            }
        }
        Ok(LevelGeometry {
            level: self.level + l,
            dim: d,
            positions,
            valid,
        })
    }

    /// `[slots × d]` offsets of each slot from its parent `l` levels up;
    /// zero rows for virtual slots.
    fn offsets_to_parent(&self, parent: &LevelGeometry, l: usize) -> Vec<f64> {
        let d = self.dim;
        let mut rel = vec![0.0; self.positions.len()];
        for s in 0..self.slots() {
            if self.valid[s] {
                let b = s >> l;
                for a in 0..d {
                    rel[s * d + a] = self.positions[s * d + a] - parent.positions[b * d + a];
                }
            }
        }
        rel
    }
}

/// Pools groups of `2^l` slots: `[x_child, p_child − p_parent]` rows of a
/// group are concatenated in slot order and projected with `w_c` of shape
/// `[2^l(C + d) × C′]`. Virtual children contribute zeros.
pub fn coarsen<'t, T: Real>(state: &LevelState<'t, T>, l: usize, w_c: &Var<'t, T>) -> Result<LevelState<'t, T>> {
    let geo = &state.geometry;
    let parent = geo.coarsened(l)?;
    let rel = geo.offsets_to_parent(&parent, l);
    let tape = state.x.tape();
    let rel = tape.constant(Tensor::from_f64(&[geo.slots(), geo.dim], &rel)?);
    let xm = state.x.mask_rows(&geo.valid)?;
    let merged = Var::concat(&[xm, rel])?.merge_rows(1 << l)?;
    Ok(LevelState {
        x: merged.matmul(w_c)?,
        geometry: parent,
    })
}

/// Distributes coarse features back to `2^l` children: each coarse row is
/// concatenated with its children's offsets `p_child − p_parent` (slot order),
/// projected with `w_r` of shape `[C′ + 2^l·d × 2^l·C]`, split into child
/// rows and added to the skip features.
pub fn refine<'t, T: Real>(
    state: &LevelState<'t, T>,
    l: usize,
    w_r: &Var<'t, T>,
    skip: &LevelState<'t, T>,
) -> Result<LevelState<'t, T>> {
    let fine = &skip.geometry;
    if fine.level + l != state.geometry.level || fine.slots() != state.geometry.slots() << l {
        return Err(Error::Config(format!(
            "skip at level {} ({} slots) does not sit {l} levels below level {} ({} slots)",
            fine.level,
            fine.slots(),
            state.geometry.level,
            state.geometry.slots()
        )));
    }
    let g = 1usize << l;
    let rel = fine.offsets_to_parent(&state.geometry, l);
    let tape = state.x.tape();
    let rel = tape.constant(Tensor::from_f64(&[state.geometry.slots(), g * fine.dim], &rel)?);
    let input = Var::concat(&[state.x, rel])?;
    let children = input.matmul(w_r)?.split_rows(g)?;
    Ok(LevelState {
        x: children.add(&skip.x)?,
        geometry: fine.clone(),
    })
}

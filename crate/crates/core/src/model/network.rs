//! The encoder/decoder network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ErwinConfig;
use super::layers::{
    coarsen, erwin_block, mpnn_step, refine, BlockParams, EdgeList, LevelGeometry, LevelState, MpnnStepParams,
};
use crate::attention::BallAttentionConfig;
use crate::balltree::{BallTree, RotationSpec};
use crate::error::{Error, Result};
use crate::geometry::CloudView;
use crate::numerics::nn::linear;
use crate::numerics::params::Bindings;
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};

/// A configured network together with its parameters.
#[derive(Clone, Debug)]
pub struct Erwin {
    pub config: ErwinConfig,
    pub params: ParamStore,
}

/// Geometry of one stage, independent of features.
#[derive(Clone, Debug)]
pub struct StageGeometry {
    pub geometry: LevelGeometry,
    /// Rotated slot `j` holds current slot `rot_perm[j]`.
    pub rot_perm: Option<Vec<usize>>,
}

/// Everything derived from positions alone: the ball tree, the per-stage
/// slot geometry and the rotated partitions.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub tree: BallTree,
    pub stages: Vec<StageGeometry>,
    /// Original positions, `[n × d]`.
    pub positions: Vec<f64>,
    /// Abstract construction work of every tree built.
    pub build_visits: u64,
}

impl Prepared {
    pub fn num_points(&self) -> usize {
        self.tree.num_real()
    }
}

/// Neighbourhood graph for the embedding plus the distance evaluations it
/// cost.
#[derive(Clone, Debug, Default)]
pub struct Neighborhood {
    pub edges: EdgeList,
    pub evaluations: u64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Fill virtual leaf slots with standard-normal values drawn from this
    /// seed instead of zeros.
    pub virtual_fill: Option<u64>,
}

/// Network output.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput<'t, T: Real> {
    /// `[n × out]` in original point order.
    pub out: Var<'t, T>,
    /// Attention query rows that had nothing to attend to, summed over
    /// layers (virtual slots).
    pub empty_rows: usize,
}

/// Slot map of a partition built on rotated coordinates of the valid slots:
/// entry `j` is the current slot placed at rotated slot `j`. Virtual slots
/// are matched in increasing order.
pub fn rotated_slot_map(geo: &LevelGeometry, rot: &RotationSpec) -> Result<(Vec<usize>, u64)> {
    let d = geo.dim;
    let real: Vec<usize> = (0..geo.slots()).filter(|&s| geo.valid[s]).collect();
    let pts: Vec<f64> = real
        .iter()
        .flat_map(|&s| geo.positions[s * d..(s + 1) * d].iter().copied())
        .collect();
    let tree = BallTree::build_rotated(&pts, d, rot)?;
    if tree.num_slots() != geo.slots() {
        return Err(Error::Config(format!(
            "rotated partition has {} slots for {} current slots",
            tree.num_slots(),
            geo.slots()
        )));
    }
    let mut spare = (0..geo.slots()).filter(|&s| !geo.valid[s]);
    let map = tree
        .perm()
        .iter()
        .map(|&p| {
            if p < real.len() {
                real[p]
            } else {
                spare.next().expect("virtual counts agree")
            }
        })
        .collect();
    Ok((map, tree.build_visits()))
}

fn block_names(prefix: &str, depth: usize) -> impl Iterator<Item = String> + '_ {
    (0..depth).map(move |j| format!("{prefix}.{j}"))
}

fn init_block(store: &mut ParamStore, prefix: &str, attn: &BallAttentionConfig, expansion: usize) -> Result<()> {
    let c = attn.dim;
    store.add_constant(&format!("{prefix}.ln1.gain"), &[c], 1.0)?;
    store.add_constant(&format!("{prefix}.ln1.bias"), &[c], 0.0)?;
    attn.init_params(store, &format!("{prefix}.attn"))?;
    store.add_constant(&format!("{prefix}.ln2.gain"), &[c], 1.0)?;
    store.add_constant(&format!("{prefix}.ln2.bias"), &[c], 0.0)?;
    store.add_weight(&format!("{prefix}.ffn.w1"), c, expansion * c)?;
    store.add_weight(&format!("{prefix}.ffn.w2"), c, expansion * c)?;
    store.add_weight(&format!("{prefix}.ffn.w3"), expansion * c, c)
}

impl Erwin {
    /// Validates `config` and initialises parameters from `seed`.
    pub fn new(config: ErwinConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new(seed);
        let (d, h) = (config.dim, config.mpnn_dim);
        p.add_weight("embed.w_in", config.embed_in(), h)?;
        p.add_constant("embed.b_in", &[h], 0.0)?;
        for t in 0..config.mpnn_steps {
            let pre = format!("mpnn.{t}");
            p.add_weight(&format!("{pre}.edge.w1"), 2 * h + d, h)?;
            p.add_constant(&format!("{pre}.edge.b1"), &[h], 0.0)?;
            p.add_weight(&format!("{pre}.edge.w2"), h, h)?;
            p.add_constant(&format!("{pre}.edge.b2"), &[h], 0.0)?;
            p.add_weight(&format!("{pre}.node.w1"), 2 * h, h)?;
            p.add_constant(&format!("{pre}.node.b1"), &[h], 0.0)?;
            p.add_weight(&format!("{pre}.node.w2"), h, h)?;
            p.add_constant(&format!("{pre}.node.b2"), &[h], 0.0)?;
        }
        let c0 = config.enc_channels[0];
        p.add_weight("embed.w_out", h, c0)?;
        p.add_constant("embed.b_out", &[c0], 0.0)?;
        let s_count = config.stages();
        for s in 0..s_count {
            let attn = config.attention(s, false);
            for name in block_names(&format!("enc.{s}"), config.enc_depths[s]) {
                init_block(&mut p, &name, &attn, config.ffn_expansion)?;
            }
            if s + 1 < s_count {
                let g = config.strides[s];
                let (c, c_next) = (config.enc_channels[s], config.enc_channels[s + 1]);
                p.add_weight(&format!("down.{s}.w"), g * (c + d), c_next)?;
            }
        }
        for s in (0..s_count.saturating_sub(1)).rev() {
            let g = config.strides[s];
            let (c, c_next) = (config.enc_channels[s], config.enc_channels[s + 1]);
            p.add_weight(&format!("up.{s}.w"), c_next + g * d, g * c)?;
            let attn = config.attention(s, true);
            for name in block_names(&format!("dec.{s}"), config.dec_depths[s]) {
                init_block(&mut p, &name, &attn, config.ffn_expansion)?;
            }
        }
        p.add_weight("head.w", c0, config.out_features)?;
        p.add_constant("head.b", &[config.out_features], 0.0)?;
        Ok(Erwin { config, params: p })
    }

    fn stage_uses_rotation(&self, s: usize) -> bool {
        let cfg = &self.config;
        cfg.rotate && (cfg.enc_depths[s] >= 2 || cfg.dec_depths.get(s).is_some_and(|&n| n >= 2))
    }

    /// Builds the ball tree, the stage geometry and the rotated partitions.
    pub fn prepare(&self, cloud: &CloudView<'_>) -> Result<Prepared> {
        let d = self.config.dim;
        if cloud.dim != d {
            return Err(Error::Input(format!(
                "cloud has dimension {} but the model expects {d}",
                cloud.dim
            )));
        }
        if cloud.feature_dim != self.config.in_features {
            return Err(Error::Input(format!(
                "cloud has {} features but the model expects {}",
                cloud.feature_dim, self.config.in_features
            )));
        }
        let tree = BallTree::build(cloud.positions, d).map_err(|e| e.in_stage("tree construction"))?;
        let mut build_visits = tree.build_visits();
        let rot = RotationSpec::default_for(d);
        let mut geo = LevelGeometry {
            level: 0,
            dim: d,
            positions: tree.leaf_positions().to_vec(),
            valid: tree.valid_mask().to_vec(),
        };
        let mut stages = Vec::with_capacity(self.config.stages());
        for s in 0..self.config.stages() {
            if s > 0 {
                geo = geo
                    .coarsened(self.config.stride_log2(s - 1))
                    .map_err(|e| e.in_stage(format!("stage {s} geometry")))?;
            }
            let rot_perm = if self.stage_uses_rotation(s) {
                let (map, visits) =
                    rotated_slot_map(&geo, &rot).map_err(|e| e.in_stage(format!("stage {s} rotated tree")))?;
                build_visits += visits;
                Some(map)
            } else {
                None
            };
            stages.push(StageGeometry {
                geometry: geo.clone(),
                rot_perm,
            });
        }
        Ok(Prepared {
            tree,
            stages,
            positions: cloud.positions.to_vec(),
            build_visits,
        })
    }

    /// k-nearest-neighbour graph for the embedding (empty without message
    /// passing). `k` is clamped to `n − 1`.
    pub fn neighborhood(&self, prep: &Prepared) -> Result<Neighborhood> {
        let n = prep.num_points();
        if self.config.mpnn_steps == 0 || n < 2 {
            return Ok(Neighborhood::default());
        }
        let k = self.config.mpnn_knn.min(n - 1);
        let graph = prep.tree.knn_graph(k).map_err(|e| e.in_stage("neighbour search"))?;
        Ok(Neighborhood {
            edges: EdgeList::from_lists(n, |i| graph.of(i)),
            evaluations: graph.evaluations,
        })
    }

    /// `[n × in]` input: the cloud's features, or a column of ones.
    pub fn input_tensor<T: Real>(&self, cloud: &CloudView<'_>) -> Result<Tensor<T>> {
        let n = cloud.len();
        match cloud.features {
            Some(f) if cloud.feature_dim > 0 => Tensor::from_f64(&[n, cloud.feature_dim], f),
            _ => Ok(Tensor::full(&[n, 1], T::one())),
        }
    }

    /// Point embedding `[n × C₀]`.
    pub fn embed<'t, T: Real>(
        &self,
        b: &Bindings<'t, T>,
        input: &Var<'t, T>,
        positions: &[f64],
        edges: &EdgeList,
    ) -> Result<Var<'t, T>> {
        let mut h = linear(input, &b.get("embed.w_in")?, Some(&b.get("embed.b_in")?))?;
        for t in 0..self.config.mpnn_steps {
            let p = MpnnStepParams::bind(b, &format!("mpnn.{t}"))?;
            h = mpnn_step(&h, positions, self.config.dim, edges, &p)?;
        }
        linear(&h, &b.get("embed.w_out")?, Some(&b.get("embed.b_out")?))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_blocks<'t, T: Real>(
        &self,
        b: &Bindings<'t, T>,
        x: Var<'t, T>,
        stage: &StageGeometry,
        prefix: &str,
        depth: usize,
        mut attn: BallAttentionConfig,
        empty: &mut usize,
    ) -> Result<Var<'t, T>> {
        attn.ball_size = attn.ball_size.min(stage.geometry.slots());
        let geo = stage.geometry.view();
        let mut x = x;
        for j in 0..depth {
            let p = BlockParams::bind(b, &format!("{prefix}.{j}"))?;
            let rot = if j % 2 == 1 { stage.rot_perm.as_deref() } else { None };
            x = erwin_block(&x, &geo, rot, &attn, &p)?;
            *empty += stage.geometry.valid.iter().filter(|v| !**v).count() * attn.heads;
        }
        Ok(x)
    }

    /// Full forward pass on one prepared cloud.
    pub fn forward<'t, T: Real>(
        &self,
        b: &Bindings<'t, T>,
        prep: &Prepared,
        nbhd: &Neighborhood,
        input: &Var<'t, T>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<'t, T>> {
        let cfg = &self.config;
        let tape = input.tape();
        let emb = self
            .embed(b, input, &prep.positions, &nbhd.edges)
            .map_err(|e| e.in_stage("embedding"))?;
        let mut x = emb.gather_rows(prep.tree.perm())?;
        if let Some(seed) = opts.virtual_fill {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = cfg.enc_channels[0];
            let mut fill = vec![T::zero(); prep.tree.num_slots() * c];
            for (s, &v) in prep.tree.valid_mask().iter().enumerate() {
                if !v {
                    for f in &mut fill[s * c..(s + 1) * c] {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *f = T::of(z);
                    }
                }
            }
            x = x.add(&tape.constant(Tensor::new(&[prep.tree.num_slots(), c], fill)?))?;
        }
        let s_count = cfg.stages();
        let mut empty = 0;
        let mut skips: Vec<LevelState<'t, T>> = Vec::with_capacity(s_count);
        let mut state = LevelState {
            x,
            geometry: prep.stages[0].geometry.clone(),
        };
        for s in 0..s_count {
            let stage = &prep.stages[s];
            state.x = self
                .run_blocks(
                    b,
                    state.x,
                    stage,
                    &format!("enc.{s}"),
                    cfg.enc_depths[s],
                    cfg.attention(s, false),
                    &mut empty,
                )
                .map_err(|e| e.in_stage(format!("encoder stage {s}")))?;
            if s + 1 < s_count {
                skips.push(state.clone());
                state = coarsen(&state, cfg.stride_log2(s), &b.get(&format!("down.{s}.w"))?)
                    .map_err(|e| e.in_stage(format!("coarsening after stage {s}")))?;
            }
        }
        for s in (0..s_count.saturating_sub(1)).rev() {
            let skip = skips.pop().expect("one skip per coarsening");
            state = refine(&state, cfg.stride_log2(s), &b.get(&format!("up.{s}.w"))?, &skip)
                .map_err(|e| e.in_stage(format!("refinement to stage {s}")))?;
            state.x = self
                .run_blocks(
                    b,
                    state.x,
                    &prep.stages[s],
                    &format!("dec.{s}"),
                    cfg.dec_depths[s],
                    cfg.attention(s, true),
                    &mut empty,
                )
                .map_err(|e| e.in_stage(format!("decoder stage {s}")))?;
        }
        let slots_out = linear(&state.x, &b.get("head.w")?, Some(&b.get("head.b")?))?;
        Ok(ForwardOutput {
            out: slots_out.gather_rows(prep.tree.inv_perm())?,
            empty_rows: empty,
        })
    }

    /// Convenience: prepare, search neighbours and run the network, returning
    /// `[n × out]` values in original order.
    pub fn predict<T: Real>(&self, cloud: &CloudView<'_>, opts: ForwardOptions) -> Result<Tensor<T>> {
        let prep = self.prepare(cloud)?;
        let nbhd = self.neighborhood(&prep)?;
        let tape = Tape::<T>::new();
        let b = self.params.bind(&tape);
        let input = tape.constant(self.input_tensor(cloud)?);
        let out = self.forward(&b, &prep, &nbhd, &input, opts)?;
        Ok(out.out.to_tensor())
    }
}

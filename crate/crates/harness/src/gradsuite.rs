//! Finite-difference checks of every differentiable operation and of the
//! whole network.

use erwin_core::attention::{ball_mhsa, cross_ball_mhsa, AttentionParams, BallAttentionConfig, SlotGeometry};
use erwin_core::geometry::{generate, PointCloud, SyntheticKind, SyntheticSpec};
use erwin_core::model::{
    coarsen, erwin_block, mpnn_step, refine, BlockParams, EdgeList, Erwin, ErwinConfig, ForwardOptions, LevelGeometry,
    LevelState, MpnnStepParams,
};
use erwin_core::numerics::gradcheck::Coords;
use erwin_core::numerics::nn::{linear, mlp2, swiglu};
use erwin_core::numerics::{ball_attention, check_gradients, Bindings, GradCheckReport, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Tolerance for single operations and layers.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Tolerance for the end-to-end check on sampled parameters.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Projects `y` on fixed random weights so every entry matters.
fn weighted_sum<'t>(y: &Var<'t, f64>, seed: u64) -> erwin_core::Result<Var<'t, f64>> {
    let w = y.tape().constant(rand_tensor(&y.shape(), seed));
    y.mul(&w)?.sum()
}

fn bind_tail<'t>(names: &[String], vars: &[Var<'t, f64>]) -> Bindings<'t, f64> {
    Bindings::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

type Case = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> erwin_core::Result<Var<'t, f64>>>,
);

fn store_inputs(first: Vec<Tensor<f64>>, store: &ParamStore) -> (Vec<Tensor<f64>>, Vec<String>) {
    let mut inputs = first;
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    (inputs, store.names().map(str::to_string).collect())
}

fn cases() -> Result<Vec<Case>> {
    let mut out: Vec<Case> = Vec::new();
    let pair = vec![rand_tensor(&[4, 3], 1), rand_tensor(&[4, 3], 2)];
    out.push((
        "matmul",
        vec![rand_tensor(&[3, 4], 3), rand_tensor(&[4, 5], 4)],
        Box::new(|_, v| weighted_sum(&v[0].matmul(&v[1])?, 5)),
    ));
    out.push((
        "transpose",
        vec![rand_tensor(&[3, 4], 6)],
        Box::new(|_, v| weighted_sum(&v[0].transpose()?, 7)),
    ));
    out.push(("add", pair.clone(), Box::new(|_, v| weighted_sum(&v[0].add(&v[1])?, 8))));
    out.push(("sub", pair.clone(), Box::new(|_, v| weighted_sum(&v[0].sub(&v[1])?, 9))));
    out.push((
        "mul",
        pair.clone(),
        Box::new(|_, v| weighted_sum(&v[0].mul(&v[1])?, 10)),
    ));
    out.push((
        "add_row",
        vec![rand_tensor(&[4, 3], 11), rand_tensor(&[3], 12)],
        Box::new(|_, v| weighted_sum(&v[0].add_row(&v[1])?, 13)),
    ));
    out.push((
        "scale",
        vec![pair[0].clone()],
        Box::new(|_, v| weighted_sum(&v[0].scale(-1.7)?, 14)),
    ));
    out.push((
        "silu",
        vec![pair[0].clone()],
        Box::new(|_, v| weighted_sum(&v[0].silu()?, 15)),
    ));
    out.push((
        "concat/slice_last",
        vec![rand_tensor(&[5, 2], 16), rand_tensor(&[5, 3], 17)],
        Box::new(|_, v| {
            let c = Var::concat(&[v[0], v[1]])?;
            weighted_sum(&c.slice_last(1, 4)?, 18)?.add(&weighted_sum(&c, 19)?)
        }),
    ));
    out.push((
        "reshape",
        vec![rand_tensor(&[4, 6], 20)],
        Box::new(|_, v| weighted_sum(&v[0].reshape(&[2, 3, 4])?, 21)),
    ));
    out.push((
        "merge_rows",
        vec![rand_tensor(&[8, 3], 22)],
        Box::new(|_, v| weighted_sum(&v[0].merge_rows(4)?, 23)),
    ));
    out.push((
        "split_rows",
        vec![rand_tensor(&[2, 12], 24)],
        Box::new(|_, v| weighted_sum(&v[0].split_rows(3)?, 25)),
    ));
    out.push((
        "softmax",
        vec![rand_tensor(&[4, 7], 26)],
        Box::new(|_, v| weighted_sum(&v[0].softmax_last(None)?.probs, 27)),
    ));
    let mut mask = vec![0.0; 4 * 7];
    for (i, m) in mask.iter_mut().enumerate() {
        if i % 3 == 0 {
            *m = f64::NEG_INFINITY;
        } else if i % 5 == 0 {
            *m = -0.8;
        }
    }
    let mask = Tensor::new(&[4, 7], mask)?;
    out.push((
        "masked softmax",
        vec![rand_tensor(&[4, 7], 28)],
        Box::new(move |_, v| weighted_sum(&v[0].softmax_last(Some(&mask))?.probs, 29)),
    ));
    out.push((
        "layer_norm",
        vec![rand_tensor(&[5, 6], 30), rand_tensor(&[6], 31), rand_tensor(&[6], 32)],
        Box::new(|_, v| weighted_sum(&v[0].layer_norm(&v[1], &v[2])?, 33)),
    ));
    out.push((
        "gather_rows",
        vec![rand_tensor(&[4, 3], 34)],
        Box::new(|_, v| weighted_sum(&v[0].gather_rows(&[3, 0, 4, 0, 2])?, 35)),
    ));
    out.push((
        "mask_rows",
        vec![rand_tensor(&[4, 3], 36)],
        Box::new(|_, v| weighted_sum(&v[0].mask_rows(&[true, false, true, true])?, 37)),
    ));
    out.push((
        "index_add_rows",
        vec![rand_tensor(&[6, 2], 38)],
        Box::new(|_, v| weighted_sum(&v[0].index_add_rows(&[1, 1, 0, 2, 1, 0], 4)?, 39)),
    ));
    out.push((
        "sum/mean",
        vec![pair[0].clone()],
        Box::new(|_, v| v[0].mul(&v[0])?.mean()?.add(&v[0].sum()?)),
    ));
    let target = rand_tensor(&[4, 3], 40);
    out.push(("mse", vec![pair[0].clone()], Box::new(move |_, v| v[0].mse(&target))));
    let dist = Tensor::new(
        &[3, 4, 4],
        rand_tensor(&[3, 4, 4], 41).data().iter().map(|v| v.abs()).collect(),
    )?;
    out.push((
        "distance_bias",
        vec![rand_tensor(&[2], 42)],
        Box::new(move |_, v| weighted_sum(&v[0].distance_bias(&dist)?, 43)),
    ));
    let valid = [true, true, false, true, true, true, true, false];
    out.push((
        "ball_attention",
        vec![
            rand_tensor(&[8, 4], 44),
            rand_tensor(&[8, 4], 45),
            rand_tensor(&[8, 4], 46),
            rand_tensor(&[2, 2, 4, 4], 47),
        ],
        Box::new(move |_, v| {
            let (o, _) = ball_attention(&v[0], &v[1], &v[2], Some(&v[3]), &valid, 2, 4)?;
            weighted_sum(&o, 48)
        }),
    ));
    out.push((
        "linear",
        vec![
            rand_tensor(&[5, 3], 49),
            rand_tensor(&[3, 2], 50),
            rand_tensor(&[2], 51),
        ],
        Box::new(|_, v| weighted_sum(&linear(&v[0], &v[1], Some(&v[2]))?, 52)),
    ));
    out.push((
        "mlp2",
        vec![
            rand_tensor(&[5, 3], 53),
            rand_tensor(&[3, 4], 54),
            rand_tensor(&[4], 55),
            rand_tensor(&[4, 2], 56),
            rand_tensor(&[2], 57),
        ],
        Box::new(|_, v| weighted_sum(&mlp2(&v[0], &v[1], &v[2], &v[3], &v[4])?, 58)),
    ));
    out.push((
        "swiglu",
        vec![
            rand_tensor(&[5, 3], 59),
            rand_tensor(&[3, 6], 60),
            rand_tensor(&[3, 6], 61),
            rand_tensor(&[6, 3], 62),
        ],
        Box::new(|_, v| weighted_sum(&swiglu(&v[0], &v[1], &v[2], &v[3])?, 63)),
    ));

    // attention layers
    let cfg = BallAttentionConfig::new(4, 2, 4, 2);
    let mut store = ParamStore::new(64);
    cfg.init_params(&mut store, "attn")?;
    store.get_mut("attn.sigma")?.data_mut().copy_from_slice(&[0.7, 1.3]);
    let positions = rand_tensor(&[8, 2], 65).into_data();
    let slot_valid = vec![true, true, true, false, true, true, true, true];
    let (inputs, names) = store_inputs(vec![rand_tensor(&[8, 4], 66)], &store);
    {
        let (pos, val, names) = (positions.clone(), slot_valid.clone(), names.clone());
        out.push((
            "ball_mhsa",
            inputs.clone(),
            Box::new(move |_, v| {
                let geo = SlotGeometry {
                    positions: &pos,
                    valid: &val,
                    dim: 2,
                };
                let p = AttentionParams::bind(&bind_tail(&names, &v[1..]), "attn")?;
                weighted_sum(&ball_mhsa(&v[0], &geo, &cfg, &p)?.out, 67)
            }),
        ));
    }
    {
        let (pos, val, names) = (positions.clone(), slot_valid.clone(), names.clone());
        out.push((
            "cross_ball_mhsa",
            inputs.clone(),
            Box::new(move |_, v| {
                let geo = SlotGeometry {
                    positions: &pos,
                    valid: &val,
                    dim: 2,
                };
                let p = AttentionParams::bind(&bind_tail(&names, &v[1..]), "attn")?;
                weighted_sum(
                    &cross_ball_mhsa(&v[0], &geo, &[5, 2, 7, 0, 1, 6, 3, 4], &cfg, &p)?.out,
                    68,
                )
            }),
        ));
    }

    // transformer block
    let mut bstore = ParamStore::new(69);
    bstore.insert("b.ln1.gain", rand_tensor(&[4], 70))?;
    bstore.add_constant("b.ln1.bias", &[4], 0.1)?;
    cfg.init_params(&mut bstore, "b.attn")?;
    bstore.insert("b.ln2.gain", rand_tensor(&[4], 71))?;
    bstore.add_constant("b.ln2.bias", &[4], -0.1)?;
    bstore.add_weight("b.ffn.w1", 4, 8)?;
    bstore.add_weight("b.ffn.w2", 4, 8)?;
    bstore.add_weight("b.ffn.w3", 8, 4)?;
    let (binputs, bnames) = store_inputs(vec![rand_tensor(&[8, 4], 72)], &bstore);
    {
        let (pos, val) = (positions.clone(), slot_valid.clone());
        out.push((
            "erwin_block",
            binputs,
            Box::new(move |_, v| {
                let geo = SlotGeometry {
                    positions: &pos,
                    valid: &val,
                    dim: 2,
                };
                let p = BlockParams::bind(&bind_tail(&bnames, &v[1..]), "b")?;
                weighted_sum(
                    &erwin_block(&v[0], &geo, Some(&[5, 2, 7, 0, 1, 6, 3, 4]), &cfg, &p)?,
                    73,
                )
            }),
        ));
    }

    // message passing
    let h = 3;
    let mut mstore = ParamStore::new(74);
    for (name, r, c) in [
        ("m.edge.w1", 2 * h + 2, h),
        ("m.edge.w2", h, h),
        ("m.node.w1", 2 * h, h),
        ("m.node.w2", h, h),
    ] {
        mstore.add_weight(name, r, c)?;
    }
    for (k, name) in ["m.edge.b1", "m.edge.b2", "m.node.b1", "m.node.b2"]
        .into_iter()
        .enumerate()
    {
        mstore.insert(name, rand_tensor(&[h], 75 + k as u64))?;
    }
    let (minputs, mnames) = store_inputs(vec![rand_tensor(&[5, h], 79)], &mstore);
    let mpos = rand_tensor(&[5, 2], 80).into_data();
    let edges = EdgeList {
        target: vec![0, 0, 1, 2, 3, 4, 4],
        source: vec![1, 2, 0, 4, 4, 2, 3],
    };
    out.push((
        "mpnn_step",
        minputs,
        Box::new(move |_, v| {
            let p = MpnnStepParams::bind(&bind_tail(&mnames, &v[1..]), "m")?;
            weighted_sum(&mpnn_step(&v[0], &mpos, 2, &edges, &p)?, 81)
        }),
    ));

    // coarsening and refinement
    let fine = LevelGeometry {
        level: 0,
        dim: 2,
        positions: positions.clone(),
        valid: slot_valid.clone(),
    };
    {
        let fine = fine.clone();
        out.push((
            "coarsen",
            vec![rand_tensor(&[8, 3], 82), rand_tensor(&[4 * 5, 6], 83)],
            Box::new(move |_, v| {
                let st = LevelState {
                    x: v[0],
                    geometry: fine.clone(),
                };
                weighted_sum(&coarsen(&st, 2, &v[1])?.x, 84)
            }),
        ));
    }
    out.push((
        "refine",
        vec![
            rand_tensor(&[2, 6], 85),
            rand_tensor(&[6 + 4 * 2, 4 * 3], 86),
            rand_tensor(&[8, 3], 87),
        ],
        Box::new(move |_, v| {
            let coarse = LevelState {
                x: v[0],
                geometry: fine.coarsened(2)?,
            };
            let skip = LevelState {
                x: v[2],
                geometry: fine.clone(),
            };
            weighted_sum(&refine(&coarse, 2, &v[1], &skip)?.x, 88)
        }),
    ));
    Ok(out)
}

/// Checks every operation and layer on all coordinates.
pub fn op_suite() -> Result<Vec<OpCheck>> {
    cases()?
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = check_gradients(&inputs, Coords::All, |t, v| f(t, v))?;
            Ok(OpCheck { name, report })
        })
        .collect()
}

/// Checks the gradient of an MSE loss of the whole network with respect to
/// `samples` randomly chosen parameter entries on an `n`-point cloud.
pub fn end_to_end(config: &ErwinConfig, n: usize, samples: usize, seed: u64) -> Result<GradCheckReport> {
    let model = Erwin::new(config.clone(), seed)?;
    let base = generate(&SyntheticSpec::new(SyntheticKind::UniformBox, n, config.dim, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let cloud = if config.in_features > 0 {
        let f = (0..n * config.in_features)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        PointCloud::with_features(base.positions().to_vec(), config.dim, f, config.in_features)?
    } else {
        base
    };
    let prep = model.prepare(&cloud.view())?;
    let nbhd = model.neighborhood(&prep)?;
    let input = model.input_tensor::<f64>(&cloud.view())?;
    let target = rand_tensor(&[n, config.out_features], seed ^ 0x7a6);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(&inputs, Coords::Sample { count: samples, seed }, |tape, v| {
        let b = bind_tail(&names, v);
        let x = tape.constant(input.clone());
        model
            .forward(&b, &prep, &nbhd, &x, ForwardOptions::default())?
            .out
            .mse(&target)
    })?;
    Ok(report)
}

/// Two-stage configuration used for the end-to-end check.
pub const END_TO_END_CONFIG: &str = r#"
dim = 2
in-features = 3
out-features = 2
enc-channels = [8, 16]
enc-depths = [2, 2]
enc-heads = [2, 2]
strides = [4]
dec-depths = [2]
dec-heads = [2]
ball-sizes = [8]
mpnn-dim = 8
mpnn-steps = 1
mpnn-knn = 4
"#;

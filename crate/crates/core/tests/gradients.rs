use erwin_core::attention::{ball_mhsa, cross_ball_mhsa, AttentionParams, BallAttentionConfig, SlotGeometry};
use erwin_core::numerics::gradcheck::Coords;
use erwin_core::numerics::nn::swiglu;
use erwin_core::numerics::{ball_attention, check_gradients, ParamStore, Tape, Tensor, Var};
use erwin_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OP_TOL: f64 = 1e-7;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random projection so that every output entry gets a distinct weight.
fn weighted_sum<'t>(y: &Var<'t, f64>, seed: u64) -> erwin_core::Result<Var<'t, f64>> {
    let w = y.tape().constant(rand_tensor(&y.shape(), seed));
    y.mul(&w)?.sum()
}

fn assert_passes(
    name: &str,
    inputs: &[Tensor<f64>],
    f: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> erwin_core::Result<Var<'t, f64>>,
) {
    let r = check_gradients(inputs, Coords::All, f).unwrap();
    assert!(r.passes(OP_TOL), "{name}: {r:?}");
}

#[test]
fn matmul_and_transpose() {
    assert_passes("matmul", &[rand_tensor(&[3, 4], 1), rand_tensor(&[4, 5], 2)], |_, v| {
        weighted_sum(&v[0].matmul(&v[1])?, 3)
    });
    assert_passes("transpose", &[rand_tensor(&[3, 4], 4)], |_, v| {
        weighted_sum(&v[0].transpose()?, 5)
    });
}

#[test]
fn elementwise_ops() {
    let ins = [rand_tensor(&[4, 3], 6), rand_tensor(&[4, 3], 7)];
    assert_passes("add", &ins, |_, v| weighted_sum(&v[0].add(&v[1])?, 8));
    assert_passes("sub", &ins, |_, v| weighted_sum(&v[0].sub(&v[1])?, 9));
    assert_passes("mul", &ins, |_, v| weighted_sum(&v[0].mul(&v[1])?, 10));
    assert_passes("scale", &ins[..1], |_, v| weighted_sum(&v[0].scale(-1.7)?, 11));
    assert_passes("silu", &ins[..1], |_, v| weighted_sum(&v[0].silu()?, 12));
    assert_passes("add_row", &[rand_tensor(&[4, 3], 13), rand_tensor(&[3], 14)], |_, v| {
        weighted_sum(&v[0].add_row(&v[1])?, 15)
    });
    assert_passes("sum/mean", &ins[..1], |_, v| v[0].mul(&v[0])?.mean()?.add(&v[0].sum()?));
}

#[test]
fn concat_slice_and_regrouping_route_gradients() {
    let ins = [rand_tensor(&[5, 2], 16), rand_tensor(&[5, 3], 17)];
    assert_passes("concat+slice", &ins, |_, v| {
        let c = Var::concat(&[v[0], v[1]])?;
        let left = c.slice_last(0, 2)?;
        let right = c.slice_last(1, 5)?;
        weighted_sum(&left, 18)?.add(&weighted_sum(&right, 19)?)
    });
    assert_passes("merge/split", &[rand_tensor(&[8, 3], 20)], |_, v| {
        let m = v[0].merge_rows(4)?;
        let s = m.split_rows(2)?;
        weighted_sum(&m, 21)?.add(&weighted_sum(&s, 22)?)
    });
}

#[test]
fn softmax_with_and_without_mask() {
    assert_passes("softmax", &[rand_tensor(&[4, 7], 23)], |_, v| {
        weighted_sum(&v[0].softmax_last(None)?.probs, 24)
    });
    let mut mask = vec![0.0; 4 * 7];
    for (i, m) in mask.iter_mut().enumerate() {
        if i % 3 == 0 {
            *m = f64::NEG_INFINITY;
        } else if i % 5 == 0 {
            *m = -0.8;
        }
    }
    let mask = Tensor::new(&[4, 7], mask).unwrap();
    assert_passes("masked softmax", &[rand_tensor(&[4, 7], 25)], move |_, v| {
        weighted_sum(&v[0].softmax_last(Some(&mask))?.probs, 26)
    });
}

#[test]
fn softmax_rows_sum_to_one() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&[16, 9], 27).cast::<f64>());
    let mut mask = vec![0.0; 9];
    mask[4] = f64::NEG_INFINITY;
    let y = x
        .softmax_last(Some(&Tensor::new(&[9], mask).unwrap()))
        .unwrap()
        .probs
        .data();
    for row in y.chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[4], 0.0);
    }
}

#[test]
fn layer_norm_gradients_and_statistics() {
    let ins = [rand_tensor(&[5, 6], 28), rand_tensor(&[6], 29), rand_tensor(&[6], 30)];
    assert_passes("layer_norm", &ins, |_, v| {
        weighted_sum(&v[0].layer_norm(&v[1], &v[2])?, 31)
    });

    let tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&[10, 32], 32).cast());
    let ones = tape.constant(Tensor::full(&[32], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[32]));
    let y = x.layer_norm(&ones, &zeros).unwrap().data();
    for row in y.chunks(32) {
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() <= 1e-6);
        // the epsilon inside the square root shrinks the variance slightly
        assert!((var - 1.0).abs() <= 1e-3, "var {var}");
    }
}

#[test]
fn gather_and_index_add() {
    assert_passes("gather", &[rand_tensor(&[4, 3], 33)], |_, v| {
        weighted_sum(&v[0].gather_rows(&[3, 0, 4, 0, 2])?, 34)
    });
    assert_passes("index_add", &[rand_tensor(&[6, 2], 35)], |_, v| {
        weighted_sum(&v[0].index_add_rows(&[1, 1, 0, 2, 1, 0], 4)?, 36)
    });
}

#[test]
fn swiglu_gradients() {
    let ins = [
        rand_tensor(&[5, 3], 37),
        rand_tensor(&[3, 6], 38),
        rand_tensor(&[3, 6], 39),
        rand_tensor(&[6, 3], 40),
    ];
    assert_passes("swiglu", &ins, |_, v| {
        weighted_sum(&swiglu(&v[0], &v[1], &v[2], &v[3])?, 41)
    });
}

#[test]
fn distance_bias_gradient() {
    let dist = rand_tensor(&[3, 4, 4], 42);
    let dist = Tensor::new(&[3, 4, 4], dist.data().iter().map(|v| v.abs()).collect()).unwrap();
    assert_passes("distance_bias", &[rand_tensor(&[2], 43)], move |_, v| {
        weighted_sum(&v[0].distance_bias(&dist)?, 44)
    });
}

#[test]
fn fused_ball_attention_gradients() {
    let valid = [true, true, false, true, true, true, true, false];
    for heads in [1, 2] {
        let ins = [
            rand_tensor(&[8, 4], 45),
            rand_tensor(&[8, 4], 46),
            rand_tensor(&[8, 4], 47),
            rand_tensor(&[2, heads, 4, 4], 48),
        ];
        assert_passes("ball_attention", &ins, move |_, v| {
            let (o, _) = ball_attention(&v[0], &v[1], &v[2], Some(&v[3]), &valid, heads, 4)?;
            weighted_sum(&o, 49)
        });
    }
}

fn attention_fixture(seed: u64) -> (ParamStore, BallAttentionConfig, Vec<f64>, Vec<bool>) {
    let cfg = BallAttentionConfig::new(4, 2, 4, 2);
    let mut store = ParamStore::new(seed);
    cfg.init_params(&mut store, "attn").unwrap();
    store
        .get_mut("attn.sigma")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[0.7, 1.3]);
    let positions = rand_tensor(&[8, 2], seed + 1).into_data();
    let valid = vec![true, true, true, false, true, true, true, true];
    (store, cfg, positions, valid)
}

fn bind_inputs<'t>(store: &ParamStore, v: &[Var<'t, f64>]) -> AttentionParams<'t, f64> {
    let names: Vec<&str> = store.names().collect();
    let at = |s: &str| v[1 + names.iter().position(|n| *n == s).unwrap()];
    AttentionParams {
        w_q: at("attn.w_q"),
        w_k: at("attn.w_k"),
        w_v: at("attn.w_v"),
        w_o: at("attn.w_o"),
        w_pos: at("attn.w_pos"),
        sigma: at("attn.sigma"),
    }
}

#[test]
fn attention_layer_gradients() {
    let (store, cfg, positions, valid) = attention_fixture(50);
    let mut inputs = vec![rand_tensor(&[8, 4], 51)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let st = store.clone();
    let (pos2, val2) = (positions.clone(), valid.clone());
    let r = check_gradients(&inputs, Coords::All, move |_, v| {
        let geo = SlotGeometry {
            positions: &pos2,
            valid: &val2,
            dim: 2,
        };
        let p = bind_inputs(&st, v);
        weighted_sum(&ball_mhsa(&v[0], &geo, &cfg, &p)?.out, 52)
    })
    .unwrap();
    assert!(r.passes(1e-6), "{r:?}");

    let perm = [5, 2, 7, 0, 1, 6, 3, 4];
    let st = store.clone();
    let r = check_gradients(&inputs, Coords::All, move |_, v| {
        let geo = SlotGeometry {
            positions: &positions,
            valid: &valid,
            dim: 2,
        };
        let p = bind_inputs(&st, v);
        weighted_sum(&cross_ball_mhsa(&v[0], &geo, &perm, &cfg, &p)?.out, 53)
    })
    .unwrap();
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn composite_graph_in_32_bit_matches_checked_64_bit_gradients() {
    // f(x, w) = mean(silu(LN(x)·w)²)
    let x = rand_tensor(&[6, 5], 54);
    let w = rand_tensor(&[5, 4], 55);
    let f = |tape: &Tape<f32>, x: &Tensor<f64>, w: &Tensor<f64>| -> (f32, Vec<f32>, Vec<f32>) {
        let xv = tape.param(x.cast());
        let wv = tape.param(w.cast());
        let g = tape.constant(Tensor::full(&[5], 1.0));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = xv.layer_norm(&g, &b).unwrap().matmul(&wv).unwrap().silu().unwrap();
        let loss = y.mul(&y).unwrap().mean().unwrap();
        let val = loss.data()[0];
        let grads = tape.backward(loss).unwrap();
        (val, grads.wrt(xv), grads.wrt(wv))
    };
    let tape = Tape::<f32>::new();
    let (_, gx, gw) = f(&tape, &x, &w);
    let r = check_gradients(&[x.clone(), w.clone()], Coords::All, |tape, v| {
        let g = tape.constant(Tensor::full(&[5], 1.0));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = v[0].layer_norm(&g, &b)?.matmul(&v[1])?.silu()?;
        y.mul(&y)?.mean()
    })
    .unwrap();
    assert!(r.passes(1e-7));
    // 64-bit tape gradients as the reference for the 32-bit ones
    let tape64 = Tape::<f64>::new();
    let xv = tape64.param(x);
    let wv = tape64.param(w);
    let g = tape64.constant(Tensor::full(&[5], 1.0));
    let b = tape64.constant(Tensor::zeros(&[5]));
    let y = xv.layer_norm(&g, &b).unwrap().matmul(&wv).unwrap().silu().unwrap();
    let loss = y.mul(&y).unwrap().mean().unwrap();
    let grads = tape64.backward(loss).unwrap();
    for (g32, g64) in [(gx, grads.wrt(xv)), (gw, grads.wrt(wv))] {
        let num: f64 = g32
            .iter()
            .zip(&g64)
            .map(|(a, b)| (*a as f64 - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = g64.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num / den <= 1e-4, "32-bit relative error {}", num / den);
    }
}

#[test]
fn second_backward_is_a_stale_tape_error() {
    let tape = Tape::<f64>::new();
    let x = tape.param(rand_tensor(&[3], 56));
    let loss = x.sum().unwrap();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::Tape(_))));
}

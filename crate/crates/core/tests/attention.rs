use erwin_core::attention::{
    ball_distances, ball_mhsa, cross_ball_mhsa, distance_bias, invert_permutation, permute_rows, rpe_inject,
    AttentionParams, BallAttentionConfig, SlotGeometry,
};
use erwin_core::balltree::{BallTree, RotationSpec};
use erwin_core::numerics::{ParamStore, Tape, Tensor};
use erwin_core::reference::dense_ball_attention;
use erwin_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    tree: BallTree,
    x: Tensor<f64>,
    store: ParamStore,
    cfg: BallAttentionConfig,
}

fn instance(n: usize, dim: usize, ball: usize, heads: usize, width: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<f64> = (0..n * dim).map(|_| rng.random::<f64>()).collect();
    let tree = BallTree::build(&pts, dim).unwrap();
    let slots = tree.num_slots();
    let x = Tensor::new(
        &[slots, width],
        (0..slots * width).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let cfg = BallAttentionConfig::new(ball.min(slots), heads, width, dim);
    let mut store = ParamStore::new(seed ^ 0x5eed);
    cfg.init_params(&mut store, "attn").unwrap();
    for s in store.get_mut("attn.sigma").unwrap().data_mut() {
        *s = rng.random_range(0.2..2.0);
    }
    Instance { tree, x, store, cfg }
}

fn run_ball(inst: &Instance, x: &Tensor<f64>) -> Vec<f64> {
    let tape = Tape::<f64>::new();
    let b = inst.store.bind(&tape);
    let p = AttentionParams::bind(&b, "attn").unwrap();
    let geo = SlotGeometry {
        positions: inst.tree.leaf_positions(),
        valid: inst.tree.valid_mask(),
        dim: inst.tree.dim(),
    };
    let xv = tape.constant(x.clone());
    ball_mhsa(&xv, &geo, &inst.cfg, &p).unwrap().out.data()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Output rows of real slots only.
fn real_rows(values: &[f64], valid: &[bool], width: usize) -> Vec<f64> {
    valid
        .iter()
        .enumerate()
        .filter(|(_, v)| **v)
        .flat_map(|(j, _)| values[j * width..(j + 1) * width].iter().copied())
        .collect()
}

#[test]
fn ball_attention_equals_block_masked_dense_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..40 {
        let n = rng.random_range(1..=256);
        let dim = 2 + trial % 2;
        let ball = [8, 16, 32][trial % 3];
        let heads = [1, 2, 4][(trial / 3) % 3];
        let inst = instance(n, dim, ball, heads, 8, trial as u64);
        let fast = run_ball(&inst, &inst.x);
        let dense = dense_ball_attention(
            &inst.x,
            inst.tree.leaf_positions(),
            inst.tree.valid_mask(),
            dim,
            &inst.cfg,
            &inst.store,
            "attn",
        )
        .unwrap();
        let diff = max_abs_diff(&fast, dense.data());
        assert!(
            diff <= 1e-10,
            "trial {trial}: n={n} ball={ball} heads={heads} diff={diff}"
        );
    }
}

#[test]
fn one_ball_with_zero_sigma_is_plain_attention() {
    let mut inst = instance(16, 2, 16, 2, 4, 3);
    inst.store.get_mut("attn.sigma").unwrap().data_mut().fill(0.0);
    inst.store.get_mut("attn.w_pos").unwrap().data_mut().fill(0.0);
    let fast = run_ball(&inst, &inst.x);
    // textbook multi-head attention, written out directly
    let w = |s: &str| inst.store.get(&format!("attn.{s}")).unwrap().data().to_vec();
    let (wq, wk, wv, wo) = (w("w_q"), w("w_k"), w("w_v"), w("w_o"));
    let x = inst.x.data();
    let (n, c, dh) = (16, 4, 2);
    let proj = |m: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = (0..c).map(|k| x[i * c + k] * m[k * c + j]).sum();
            }
        }
        out
    };
    let (q, k, v) = (proj(&wq), proj(&wk), proj(&wv));
    let mut concat = vec![0.0; n * c];
    for h in 0..2 {
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh)
                        .map(|t| q[i * c + h * dh + t] * k[j * c + h * dh + t])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dh {
                concat[i * c + h * dh + t] = (0..n).map(|j| e[j] / z * v[j * c + h * dh + t]).sum();
            }
        }
    }
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            out[i * c + j] = (0..c).map(|k| concat[i * c + k] * wo[k * c + j]).sum();
        }
    }
    assert!(max_abs_diff(&fast, &out) <= 1e-12);
}

#[test]
fn virtual_slot_features_do_not_reach_real_outputs() {
    let inst = instance(37, 3, 8, 2, 8, 4);
    let base = run_ball(&inst, &inst.x);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut x = inst.x.clone();
    for (j, &valid) in inst.tree.valid_mask().iter().enumerate() {
        if !valid {
            for v in &mut x.data_mut()[j * 8..(j + 1) * 8] {
                *v = rng.random_range(-50.0..50.0);
            }
        }
    }
    let pert = run_ball(&inst, &x);
    let valid = inst.tree.valid_mask();
    assert_eq!(real_rows(&base, valid, 8), real_rows(&pert, valid, 8));
}

#[test]
fn changing_a_point_outside_a_ball_leaves_it_untouched() {
    let inst = instance(64, 2, 8, 2, 4, 5);
    let base = run_ball(&inst, &inst.x);
    let mut x = inst.x.clone();
    // perturb slot 20 (ball 2); ball 0 must not change
    x.data_mut()[20 * 4] += 3.0;
    let pert = run_ball(&inst, &x);
    assert_eq!(&base[..8 * 4], &pert[..8 * 4]);
    assert_ne!(&base[16 * 4..24 * 4], &pert[16 * 4..24 * 4]);
}

#[test]
fn distance_bias_is_symmetric_with_zero_diagonal() {
    let inst = instance(50, 3, 16, 2, 4, 6);
    let tape = Tape::<f64>::new();
    let sigma = tape.param(Tensor::from_f64(&[2], &[0.6, 1.4]).unwrap());
    let geo = SlotGeometry {
        positions: inst.tree.leaf_positions(),
        valid: inst.tree.valid_mask(),
        dim: 3,
    };
    let bias = distance_bias(&geo, 16, &sigma).unwrap().data();
    let b = 16;
    for blk in bias.chunks(b * b) {
        for i in 0..b {
            assert_eq!(blk[i * b + i], 0.0);
            for j in 0..b {
                assert_eq!(blk[i * b + j], blk[j * b + i]);
            }
        }
    }
    let zero = tape.param(Tensor::zeros(&[2]));
    assert!(distance_bias(&geo, 16, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(ball_distances(&geo, 16).unwrap().iter().all(|&d| d >= 0.0));
}

#[test]
fn rpe_injection_matches_slot_by_slot_evaluation() {
    let inst = instance(21, 2, 4, 1, 3, 7);
    let tape = Tape::<f64>::new();
    let w_pos = Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();
    let w = tape.constant(w_pos.clone());
    let pos = inst.tree.leaf_positions();
    let valid = inst.tree.valid_mask();
    let geo = SlotGeometry {
        positions: pos,
        valid,
        dim: 2,
    };
    let x = tape.constant(inst.x.clone());
    let got = rpe_inject(&x, &geo, 4, &w).unwrap().data();
    for s in 0..valid.len() {
        let ball = s / 4;
        let members: Vec<usize> = (ball * 4..ball * 4 + 4).filter(|&j| valid[j]).collect();
        for col in 0..3 {
            let mut expected = inst.x.data()[s * 3 + col];
            if valid[s] {
                for a in 0..2 {
                    let c = members.iter().map(|&j| pos[j * 2 + a]).sum::<f64>() / members.len() as f64;
                    expected += (pos[s * 2 + a] - c) * w_pos.data()[a * 3 + col];
                }
            }
            assert!((got[s * 3 + col] - expected).abs() < 1e-14);
        }
    }
    let zero = tape.constant(Tensor::zeros(&[2, 3]));
    assert_eq!(rpe_inject(&x, &geo, 4, &zero).unwrap().data(), inst.x.data());
}

#[test]
fn cross_ball_with_the_same_tree_equals_ball_attention() {
    let inst = instance(40, 2, 8, 2, 4, 8);
    let perm = inst.tree.relative_permutation(&inst.tree).unwrap();
    let tape = Tape::<f64>::new();
    let b = inst.store.bind(&tape);
    let p = AttentionParams::bind(&b, "attn").unwrap();
    let geo = SlotGeometry {
        positions: inst.tree.leaf_positions(),
        valid: inst.tree.valid_mask(),
        dim: 2,
    };
    let x = tape.constant(inst.x.clone());
    let a = cross_ball_mhsa(&x, &geo, &perm, &inst.cfg, &p).unwrap().out.data();
    assert_eq!(a, run_ball(&inst, &inst.x));
}

#[test]
fn cross_ball_equals_permute_attend_unpermute() {
    let inst = instance(45, 3, 8, 4, 8, 9);
    let rotated = BallTree::build_rotated(
        &inst.tree.scatter(inst.tree.leaf_positions(), 3).unwrap(),
        3,
        &RotationSpec::default_for(3),
    )
    .unwrap();
    let perm = inst.tree.relative_permutation(&rotated).unwrap();
    let tape = Tape::<f64>::new();
    let b = inst.store.bind(&tape);
    let p = AttentionParams::bind(&b, "attn").unwrap();
    let geo = SlotGeometry {
        positions: inst.tree.leaf_positions(),
        valid: inst.tree.valid_mask(),
        dim: 3,
    };
    let x = tape.constant(inst.x.clone());
    let fused = cross_ball_mhsa(&x, &geo, &perm, &inst.cfg, &p).unwrap().out.data();

    // three explicit steps on plain arrays
    let xp = permute_rows(inst.x.data(), 8, &perm);
    let pos_p = permute_rows(inst.tree.leaf_positions(), 3, &perm);
    let valid_p = permute_rows(inst.tree.valid_mask(), 1, &perm);
    let attended = dense_ball_attention(
        &Tensor::new(&[perm.len(), 8], xp).unwrap(),
        &pos_p,
        &valid_p,
        3,
        &inst.cfg,
        &inst.store,
        "attn",
    )
    .unwrap();
    let back = permute_rows(attended.data(), 8, &invert_permutation(&perm).unwrap());
    assert!(max_abs_diff(&fused, &back) <= 1e-10);
    // and the rotation genuinely changes the result
    assert!(max_abs_diff(&fused, &run_ball(&inst, &inst.x)) > 1e-6);
}

#[test]
fn slot_count_must_split_into_balls() {
    let inst = instance(16, 2, 8, 2, 4, 10);
    let tape = Tape::<f64>::new();
    let b = inst.store.bind(&tape);
    let p = AttentionParams::bind(&b, "attn").unwrap();
    let pos = vec![0.0; 12 * 2];
    let valid = vec![true; 12];
    let geo = SlotGeometry {
        positions: &pos,
        valid: &valid,
        dim: 2,
    };
    let x = tape.constant(Tensor::zeros(&[12, 4]));
    assert!(matches!(ball_mhsa(&x, &geo, &inst.cfg, &p), Err(Error::Shape(_))));
}

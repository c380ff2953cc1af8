use std::collections::BTreeSet;

use erwin_core::geometry::PointCloud;
use erwin_core::model::Erwin;
use erwin_core::reference::knn_linear_scan;
use erwin_harness::presets;
use erwin_harness::probe::{count, hop_set, is_subset, probe_cloud, Probe};

fn setup(preset: &str, n: usize, seed: u64) -> (Erwin, PointCloud) {
    let config = presets::load(preset).unwrap();
    let cloud = probe_cloud(&config, n, seed).unwrap();
    (Erwin::new(config, seed).unwrap(), cloud)
}

/// Real points sharing `target`'s leaf ball of `ball` slots.
fn own_ball(perm: &[usize], n: usize, target: usize, ball: usize) -> BTreeSet<usize> {
    let slot = perm.iter().position(|&p| p == target).unwrap();
    let b = slot / ball;
    perm[b * ball..(b + 1) * ball]
        .iter()
        .copied()
        .filter(|&p| p < n)
        .collect()
}

fn members(mask: &[bool]) -> BTreeSet<usize> {
    mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect()
}

#[test]
fn gradient_and_perturbation_fields_agree_on_small_clouds() {
    for (preset, n) in [
        (presets::PROBE_ATTENTION, 100),
        (presets::PROBE_MPNN, 64),
        (presets::CROSS_BALL, 48),
    ] {
        let (model, cloud) = setup(preset, n, 4);
        let probe = Probe::new(&model, &cloud.view()).unwrap();
        for target in [0, n / 3, n - 1] {
            let g = probe.gradient_field(target).unwrap();
            let p = probe.perturbation_field(target).unwrap();
            assert_eq!(g, p, "n={n} target={target}");
            assert!(g[target], "a point always influences itself");
        }
    }
}

#[test]
fn single_attention_layer_sees_exactly_its_ball() {
    let (model, cloud) = setup(presets::PROBE_ATTENTION, 300, 1);
    let probe = Probe::new(&model, &cloud.view()).unwrap();
    let ball = model.config.ball_size(0);
    for target in [0, 17, 150, 299] {
        let field = members(&probe.gradient_field(target).unwrap());
        assert_eq!(
            field,
            own_ball(probe.prepared().tree.perm(), 300, target, ball),
            "target {target}"
        );
    }
}

#[test]
fn message_passing_stays_within_the_hop_neighbourhood() {
    let (model, cloud) = setup(presets::PROBE_MPNN, 200, 2);
    let probe = Probe::new(&model, &cloud.view()).unwrap();
    let k = model.config.mpnn_knn;
    let graph: Vec<Vec<usize>> = (0..200).map(|i| knn_linear_scan(cloud.positions(), 2, i, k)).collect();
    for target in [3, 99] {
        let field = probe.gradient_field(target).unwrap();
        let reach = hop_set(200, target, model.config.mpnn_steps, |i| &graph[i]);
        assert!(is_subset(&field, &reach), "target {target}");
        // one step short of the full depth is strictly too small
        let short = hop_set(200, target, model.config.mpnn_steps - 1, |i| &graph[i]);
        assert!(count(&field) > count(&short) || field == reach);
    }
}

#[test]
fn full_model_reaching_the_root_sees_everything() {
    let (model, cloud) = setup(presets::PROBE_FULL, 600, 3);
    let probe = Probe::new(&model, &cloud.view()).unwrap();
    let field = probe.gradient_field(42).unwrap();
    assert_eq!(count(&field), 600);
}

#[test]
fn out_of_range_target_is_an_argument_error() {
    let (model, cloud) = setup(presets::PROBE_ATTENTION, 20, 0);
    let probe = Probe::new(&model, &cloud.view()).unwrap();
    assert!(probe.gradient_field(20).unwrap_err().is_validation());
    assert!(probe.perturbation_field(99).unwrap_err().is_validation());
}

#[test]
fn probe_cloud_carries_the_configured_features() {
    let config = presets::load(presets::PROBE_FULL).unwrap();
    let cloud = probe_cloud(&config, 50, 9).unwrap();
    assert_eq!(cloud.feature_dim(), config.in_features);
    assert_eq!(cloud.features().unwrap().len(), 50 * config.in_features);
    assert_eq!(cloud.positions(), probe_cloud(&config, 50, 9).unwrap().positions());
}

#[test]
fn points_outside_the_field_leave_the_output_bit_identical() {
    let (model, cloud) = setup(presets::PROBE_ATTENTION, 100, 6);
    let probe = Probe::new(&model, &cloud.view()).unwrap();
    let field = probe.gradient_field(0).unwrap();
    let outsider = field.iter().position(|m| !m).unwrap();
    let base = model.predict::<f64>(&cloud.view(), Default::default()).unwrap();
    let mut feats = cloud.features().unwrap().to_vec();
    feats[outsider * cloud.feature_dim()] += 1e3;
    let bumped = PointCloud::with_features(cloud.positions().to_vec(), 2, feats, cloud.feature_dim()).unwrap();
    let out = model.predict::<f64>(&bumped.view(), Default::default()).unwrap();
    let w = model.config.out_features;
    assert_eq!(&out.data()[..w], &base.data()[..w]);
    assert_ne!(
        out.data()[outsider * w..(outsider + 1) * w],
        base.data()[outsider * w..(outsider + 1) * w]
    );
}

use std::hint::black_box;
use std::sync::Mutex;
use std::time::Instant;

use erwin_core::balltree::BallTree;
use erwin_core::geometry::SyntheticKind;
use erwin_core::model::Erwin;
use erwin_harness::bench::{
    bench_scaling, doubling_sizes, median, write_csv, BenchOptions, CostMode, ErwinWorkload, PhaseCost,
    SyntheticWorkload, CSV_HEADER,
};
use erwin_harness::fit::fit_power_law;
use erwin_harness::presets;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tests run concurrently on possibly one core; everything that does real
/// work or measures time holds this lock so timings are not contaminated.
static EXCLUSIVE: Mutex<()> = Mutex::new(());

fn synthetic(f: fn(f64) -> f64) -> SyntheticWorkload<impl FnMut(usize) -> PhaseCost> {
    SyntheticWorkload {
        cost: move |n: usize| PhaseCost {
            build: 1.0,
            forward: f(n as f64),
            backward: None,
        },
        mode: CostMode::Abstract,
    }
}

#[test]
fn injected_linear_law_is_recovered_exactly() {
    let mut w = synthetic(|n| 2.0 * n);
    let report = bench_scaling(&mut w, &BenchOptions::new(doubling_sizes(10, 16), 0)).unwrap();
    let fit = report.fit(CostMode::Abstract).unwrap();
    assert!((fit.beta - 1.0).abs() < 1e-9, "beta {}", fit.beta);
    assert!((fit.c - 2.0).abs() < 1e-9 * 2.0, "c {}", fit.c);
    assert!((fit.r2 - 1.0).abs() < 1e-9);
    assert_eq!(fit.points, 7);
    assert!(report.warnings.is_empty());
}

#[test]
fn injected_quadratic_law_is_recovered_exactly() {
    let mut w = synthetic(|n| n * n);
    let report = bench_scaling(&mut w, &BenchOptions::new(doubling_sizes(10, 14), 0)).unwrap();
    let fit = report.fit(CostMode::Abstract).unwrap();
    assert!((fit.beta - 2.0).abs() < 1e-9, "beta {}", fit.beta);
    assert!((fit.r2 - 1.0).abs() < 1e-9);
}

#[test]
fn small_sizes_are_excluded_from_the_fit() {
    // below the fit floor the cost is wildly off the law; it must not matter
    let mut w = synthetic(|n| if n < 1024.0 { 1e9 } else { 3.0 * n.powf(1.5) });
    let mut sizes = doubling_sizes(4, 9);
    sizes.extend(doubling_sizes(10, 13));
    let report = bench_scaling(&mut w, &BenchOptions::new(sizes, 0)).unwrap();
    let fit = report.fit(CostMode::Abstract).unwrap();
    assert_eq!(fit.points, 4);
    assert!((fit.beta - 1.5).abs() < 1e-9);
}

#[test]
fn too_few_sizes_skip_the_fit_with_a_warning() {
    let mut w = synthetic(|n| n);
    let report = bench_scaling(&mut w, &BenchOptions::new(vec![256, 512, 1024, 2048], 0)).unwrap();
    assert_eq!(report.records.len(), 4);
    assert!(report.fit(CostMode::Abstract).is_none());
    assert_eq!(report.warnings.len(), 1);
    assert!(report.warnings[0].contains("skipped"), "{}", report.warnings[0]);
}

#[test]
fn least_squares_fit_matches_a_hand_computation() {
    // three points off an exact law: slope by the normal equations
    let samples: [(usize, f64); 3] = [(1024, 10.0), (2048, 22.0), (4096, 39.0)];
    let xs: Vec<f64> = samples.iter().map(|s| (s.0 as f64).ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / 3.0;
    let my = ys.iter().sum::<f64>() / 3.0;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let fit = fit_power_law(&samples).unwrap();
    assert!((fit.beta - num / den).abs() < 1e-12);
    assert!(fit.r2 < 1.0 && fit.r2 > 0.9);
}

#[test]
fn invalid_options_are_validation_errors() {
    let mut w = synthetic(|n| n);
    for opts in [
        BenchOptions::new(vec![], 0),
        BenchOptions::new(vec![2048, 1024], 0),
        BenchOptions::new(vec![0, 1024], 0),
        BenchOptions {
            repeats: 2,
            ..BenchOptions::new(vec![1024], 0)
        },
    ] {
        let err = bench_scaling(&mut w, &opts).unwrap_err();
        assert!(err.is_validation(), "{err}");
    }
}

#[test]
fn median_of_odd_and_even_samples() {
    assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
}

fn abstract_csv(seed: u64) -> String {
    let model = Erwin::new(presets::load(presets::BENCH).unwrap(), seed).unwrap();
    let mut w = ErwinWorkload::new(model, SyntheticKind::UniformBox, 2, &[CostMode::Abstract], 1)
        .unwrap()
        .with_backward(true);
    let opts = BenchOptions {
        warmups: 0,
        ..BenchOptions::new(vec![200, 300, 500], seed)
    };
    let report = bench_scaling(&mut w, &opts).unwrap();
    let mut out = Vec::new();
    write_csv(&report.records, &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn abstract_cost_csv_is_byte_stable() {
    let _guard = EXCLUSIVE.lock().unwrap_or_else(|e| e.into_inner());
    let a = abstract_csv(7);
    let b = abstract_csv(7);
    assert_eq!(a, b);
    let mut lines = a.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        assert_eq!(row.len(), CSV_HEADER.split(',').count());
        assert_eq!(row[4], "abstract");
        assert_eq!(row[5], "ops");
        // backward is twice the forward tape work, so it is positive
        assert!(row[9].parse::<f64>().unwrap() > 0.0);
    }
    assert_ne!(a, abstract_csv(8), "a different seed draws different clouds");
}

#[test]
fn both_modes_come_from_one_run() {
    let _guard = EXCLUSIVE.lock().unwrap_or_else(|e| e.into_inner());
    let model = Erwin::new(presets::load(presets::BENCH).unwrap(), 0).unwrap();
    let mut w = ErwinWorkload::new(
        model,
        SyntheticKind::UniformBox,
        1,
        &[CostMode::WallClock, CostMode::Abstract],
        1,
    )
    .unwrap();
    let opts = BenchOptions {
        warmups: 0,
        ..BenchOptions::new(vec![64, 128], 0)
    };
    let report = bench_scaling(&mut w, &opts).unwrap();
    assert_eq!(report.records(CostMode::WallClock).count(), 2);
    assert_eq!(report.records(CostMode::Abstract).count(), 2);
    for r in &report.records {
        assert!(r.build > 0.0 && r.forward > 0.0);
        assert!(r.backward.is_none());
    }
}

fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * 3).map(|_| rng.random::<f64>()).collect()
}

fn median_build_seconds(pts: &[f64], reps: usize, inner: usize) -> f64 {
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..inner {
                black_box(BallTree::build(black_box(pts), 3).unwrap());
            }
            t.elapsed().as_secs_f64() / inner as f64
        })
        .collect();
    median(&mut times)
}

#[test]
fn single_point_build_is_sub_microsecond() {
    let _guard = EXCLUSIVE.lock().unwrap_or_else(|e| e.into_inner());
    let pts = uniform(1, 0);
    let t = median_build_seconds(&pts, 11, 1000);
    assert!(t < 1e-6, "median single-point build {t:e} s");
}

#[test]
fn build_cost_grows_near_linearly_from_16k_to_32k() {
    let _guard = EXCLUSIVE.lock().unwrap_or_else(|e| e.into_inner());
    let (a, b) = (uniform(1 << 14, 1), uniform(1 << 15, 2));
    let visits = |p: &[f64]| BallTree::build(p, 3).unwrap().build_visits() as f64;
    let abstract_growth = visits(&b) / visits(&a);
    assert!(abstract_growth <= 2.5, "node-visit growth {abstract_growth}");
    median_build_seconds(&a, 2, 1);
    let wall_growth = median_build_seconds(&b, 7, 1) / median_build_seconds(&a, 7, 1);
    assert!(wall_growth <= 2.5, "wall-clock growth {wall_growth}");
}

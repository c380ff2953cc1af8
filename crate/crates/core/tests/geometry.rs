use erwin_core::geometry::{
    generate, load_csv, read_csv, save_csv, write_csv, PointCloud, SyntheticKind, SyntheticSpec,
};
use erwin_core::Error;

const KINDS: [SyntheticKind; 4] = [
    SyntheticKind::UniformBox,
    SyntheticKind::GaussianBlobs { blobs: 3, spread: 0.1 },
    SyntheticKind::ChainPolymer { bond_length: 0.05 },
    SyntheticKind::Annulus { inner: 0.5, outer: 1.0 },
];

#[test]
fn generators_are_deterministic_per_seed() {
    for kind in KINDS {
        for dim in [2, 3] {
            let a = generate(&SyntheticSpec::new(kind, 200, dim, 9)).unwrap();
            let b = generate(&SyntheticSpec::new(kind, 200, dim, 9)).unwrap();
            let c = generate(&SyntheticSpec::new(kind, 200, dim, 10)).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.positions(), c.positions());
            assert_eq!(a.len(), 200);
            assert_eq!(a.dim(), dim);
        }
    }
}

#[test]
fn uniform_box_stays_in_the_unit_box() {
    let c = generate(&SyntheticSpec::new(SyntheticKind::UniformBox, 1000, 3, 1)).unwrap();
    assert!(c.positions().iter().all(|&v| (0.0..1.0).contains(&v)));
}

#[test]
fn chain_bonds_never_exceed_the_bond_length() {
    for dim in [2, 3] {
        let c = generate(&SyntheticSpec::new(
            SyntheticKind::ChainPolymer { bond_length: 0.05 },
            500,
            dim,
            3,
        ))
        .unwrap();
        for i in 1..c.len() {
            let d: f64 = c
                .point(i)
                .iter()
                .zip(c.point(i - 1))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(d <= 0.05 && d > 0.0, "bond {i}: {d}");
        }
    }
}

#[test]
fn annulus_radii_lie_in_the_shell() {
    let c = generate(&SyntheticSpec::new(
        SyntheticKind::Annulus { inner: 0.4, outer: 0.6 },
        300,
        3,
        2,
    ))
    .unwrap();
    for i in 0..c.len() {
        let r = c.point(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((0.4 - 1e-12..=0.6 + 1e-12).contains(&r));
    }
}

#[test]
fn bad_generator_settings_are_config_errors() {
    for spec in [
        SyntheticSpec::new(SyntheticKind::UniformBox, 0, 2, 0),
        SyntheticSpec::new(SyntheticKind::UniformBox, 5, 4, 0),
        SyntheticSpec::new(SyntheticKind::ChainPolymer { bond_length: 0.0 }, 5, 2, 0),
        SyntheticSpec::new(SyntheticKind::GaussianBlobs { blobs: 0, spread: 0.1 }, 5, 2, 0),
        SyntheticSpec::new(SyntheticKind::Annulus { inner: 1.0, outer: 0.5 }, 5, 2, 0),
    ] {
        assert!(matches!(generate(&spec), Err(Error::Config(_))), "{spec:?}");
    }
    assert!(matches!("spiral".parse::<SyntheticKind>(), Err(Error::Config(_))));
}

#[test]
fn kind_names_round_trip() {
    for kind in KINDS {
        let parsed: SyntheticKind = kind.to_string().parse().unwrap();
        assert_eq!(parsed.to_string(), kind.to_string());
    }
}

#[test]
fn csv_round_trip_is_exact() {
    let base = generate(&SyntheticSpec::new(
        SyntheticKind::GaussianBlobs { blobs: 2, spread: 0.3 },
        40,
        3,
        4,
    ))
    .unwrap();
    let feats: Vec<f64> = (0..80).map(|i| (i as f64).sqrt() / 7.0).collect();
    let cloud = PointCloud::with_features(base.positions().to_vec(), 3, feats, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.csv");
    save_csv(&cloud, &path).unwrap();
    assert_eq!(load_csv(&path, 3).unwrap(), cloud);

    let mut buf = Vec::new();
    write_csv(&base, &mut buf).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("x0,x1,x2\n"));
    assert_eq!(read_csv(buf.as_slice(), 3).unwrap(), base);
}

#[test]
fn csv_without_header_is_accepted() {
    let c = read_csv("0.5,1\n2,3\n".as_bytes(), 2).unwrap();
    assert_eq!(c.positions(), &[0.5, 1.0, 2.0, 3.0]);
    assert!(c.features().is_none());
}

#[test]
fn csv_errors_name_the_line() {
    for (text, line) in [
        ("x,y\n1,2\n3,abc\n", 3),
        ("1,2,3\n4,5\n", 2),
        ("1\n", 1),
        ("1,2\nnan,2\n", 2),
    ] {
        match read_csv(text.as_bytes(), 2) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    assert!(matches!(read_csv("x,y\n".as_bytes(), 2), Err(Error::Input(_))));
    assert!(matches!(load_csv("/nonexistent/cloud.csv", 2), Err(Error::Io(_))));
}

#[test]
fn batches_view_their_own_points() {
    let a = PointCloud::new(vec![0.0, 0.0, 1.0, 1.0], 2).unwrap();
    let b = PointCloud::new(vec![5.0, 5.0, 6.0, 6.0, 7.0, 7.0], 2).unwrap();
    let both = PointCloud::concat(&[a, b]).unwrap();
    assert_eq!(both.batch_len(), 2);
    assert_eq!(both.batch_offsets(), &[0, 2, 5]);
    assert_eq!(both.batch(1).positions, &[5.0, 5.0, 6.0, 6.0, 7.0, 7.0]);
}

#[test]
fn malformed_clouds_are_rejected() {
    assert!(matches!(PointCloud::new(vec![0.0, 1.0, 2.0], 2), Err(Error::Input(_))));
    assert!(matches!(PointCloud::new(vec![0.0, 1.0], 4), Err(Error::Config(_))));
    assert!(PointCloud::with_features(vec![0.0, 1.0], 2, vec![1.0, 2.0, 3.0], 2).is_err());
}

mod common;

use mutadapt::error::Error;
use mutadapt::tum::{associate, load_tum_sequence};

#[test]
fn fixture_associates_at_tolerance_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    let opts = common::tum_fixture(dir.path());
    let (pairs, skipped) = associate(dir.path(), opts.tolerance).unwrap();
    let stamps: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    assert_eq!(stamps, vec![1.0, 1.1, 1.2, 1.4]);
    assert_eq!(skipped, 1);
    assert!(pairs[1].1.ends_with("depth/1.png"));
}

#[test]
fn fixture_depth_converts_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let opts = common::tum_fixture(dir.path());
    let seq = load_tum_sequence(dir.path(), &opts).unwrap();
    assert_eq!((seq.associated, seq.skipped, seq.keyframes.len()), (4, 1, 4));
    for kf in &seq.keyframes {
        assert!(kf.gt_depth.as_ref().unwrap().data().iter().all(|d| *d == 1.0));
        assert!(kf.sparse_points.iter().all(|p| p.depth == 1.0));
    }
    assert!((seq.keyframes[3].pose.translation.x - 0.04).abs() < 1e-12);
}

#[test]
fn missing_sequence_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let opts = common::tum_fixture(dir.path());
    let gone = dir.path().join("elsewhere");
    assert!(matches!(load_tum_sequence(&gone, &opts), Err(Error::MissingFile(p)) if p == gone));
    std::fs::remove_file(dir.path().join("depth.txt")).unwrap();
    assert!(matches!(load_tum_sequence(dir.path(), &opts), Err(Error::MissingFile(_))));
}

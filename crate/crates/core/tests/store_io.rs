//! On-disk format round trips and rejection of malformed files.

use std::io::Write;

use fewshot_ot::{
    generate_synthetic_store, load_feature_store, write_feature_store, Error, FileFormat,
    SkewMode,
};

#[test]
fn binary_round_trip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.fvs");
    // 2 classes x 3 vectors x dim 4
    let store = generate_synthetic_store(2, 4, 3, 1.5, SkewMode::Gaussian, 42).unwrap();
    write_feature_store(&store, &path, FileFormat::Binary).unwrap();

    let loaded = load_feature_store(&path, FileFormat::Binary).unwrap();
    assert_eq!(loaded.dim(), 4);
    assert_eq!(loaded.num_classes(), 2);
    for (a, b) in store.classes().iter().zip(loaded.classes()) {
        assert_eq!(a.class_id, b.class_id);
        assert_eq!(a.vectors, b.vectors);
    }
}

#[test]
fn csv_round_trip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.csv");
    let store = generate_synthetic_store(3, 5, 4, 2.0, SkewMode::ReluSkewed, 7).unwrap();
    write_feature_store(&store, &path, FileFormat::Csv).unwrap();

    let loaded = load_feature_store(&path, FileFormat::Csv).unwrap();
    assert_eq!(loaded.dim(), store.dim());
    assert_eq!(loaded.num_classes(), store.num_classes());
    for (a, b) in store.classes().iter().zip(loaded.classes()) {
        assert_eq!(a.class_id, b.class_id);
        assert_eq!(a.vectors, b.vectors);
    }
}

#[test]
fn csv_with_wrong_column_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "class,f0,f1\n0,0.5,0.25\n1,0.5\n").unwrap();
    let err = load_feature_store(&path, FileFormat::Csv).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { expected: 2, got: 1, .. }));
}

#[test]
fn negative_feature_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("neg.csv");
    std::fs::write(&path, "class,f0,f1\n0,0.5,-0.5\n").unwrap();
    let err = load_feature_store(&path, FileFormat::Csv).unwrap_err();
    assert!(matches!(err, Error::NegativeFeature { .. }));
}

#[test]
fn corrupt_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corrupt.fvs");
    let mut file = std::fs::File::create(&path).unwrap();
    file.write_all(b"NOPE\x04\x00\x00\x00\x01\x00\x00\x00").unwrap();
    drop(file);
    let err = load_feature_store(&path, FileFormat::Binary).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
}

#[test]
fn truncated_binary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trunc.fvs");
    let store = generate_synthetic_store(2, 4, 3, 1.5, SkewMode::Gaussian, 42).unwrap();
    write_feature_store(&store, &path, FileFormat::Binary).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(load_feature_store(&path, FileFormat::Binary).is_err());
}

#[test]
fn trailing_bytes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trail.fvs");
    let store = generate_synthetic_store(2, 4, 3, 1.5, SkewMode::Gaussian, 42).unwrap();
    write_feature_store(&store, &path, FileFormat::Binary).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_feature_store(&path, FileFormat::Binary),
        Err(Error::Format(_))
    ));
}

#[test]
fn csv_header_must_match_convention() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.csv");
    std::fs::write(&path, "label,f0,f1\n0,0.5,0.5\n").unwrap();
    assert!(matches!(
        load_feature_store(&path, FileFormat::Csv),
        Err(Error::Format(_))
    ));
}

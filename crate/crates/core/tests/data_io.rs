use std::fs;

use maskgate::data::{
    load_csv, load_idx, split_holdout, write_idx_images, write_idx_labels, Dataset,
};
use maskgate::tensor::Tensor;
use maskgate::Error;
use proptest::prelude::*;

fn idx_pair(
    dir: &std::path::Path,
    pixels: &[u8],
    labels: &[u8],
    side: usize,
) -> (std::path::PathBuf, std::path::PathBuf) {
    let img = dir.join("img.idx");
    let lbl = dir.join("lbl.idx");
    write_idx_images(&img, side, side, pixels).unwrap();
    write_idx_labels(&lbl, labels).unwrap();
    (img, lbl)
}

#[test]
fn idx_round_trip_scales_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..3 * 4).map(|i| (i * 20) as u8).collect();
    let (img, lbl) = idx_pair(dir.path(), &pixels, &[2, 0, 1], 2);
    let d: Dataset<f64> = load_idx(&img, &lbl).unwrap();
    assert_eq!(d.inputs.shape(), &[3, 1, 2, 2]);
    assert_eq!(d.labels, vec![2, 0, 1]);
    assert_eq!(d.classes, 3);
    for (v, p) in d.inputs.data().iter().zip(&pixels) {
        assert!((v - f64::from(*p) / 255.0).abs() < 1e-15);
    }
}

#[test]
fn idx_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = idx_pair(dir.path(), &[0; 8], &[0, 1], 2);

    let mut bytes = fs::read(&img).unwrap();
    bytes[3] = 1;
    let bad_magic = dir.path().join("magic.idx");
    fs::write(&bad_magic, &bytes).unwrap();
    assert!(matches!(
        load_idx::<f64>(&bad_magic, &lbl),
        Err(Error::Format { .. })
    ));

    let bytes = fs::read(&img).unwrap();
    let short = dir.path().join("short.idx");
    fs::write(&short, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(
        load_idx::<f64>(&short, &lbl),
        Err(Error::Format { .. })
    ));

    let three = dir.path().join("three.idx");
    write_idx_labels(&three, &[0, 1, 1]).unwrap();
    assert!(matches!(load_idx::<f64>(&img, &three), Err(Error::Data(_))));

    let missing = dir.path().join("missing.idx");
    match load_idx::<f64>(&missing, &lbl) {
        Err(Error::Io { path, .. }) => assert_eq!(path, missing),
        other => panic!("expected io error, got {other:?}"),
    }
}

#[test]
fn csv_with_and_without_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "label,p0,p1,p2,p3\n1,0,255,0,255\n0,255,0,255,0\n").unwrap();
    let d: Dataset<f64> = load_csv(&path, 2, 2, 1).unwrap();
    assert_eq!(d.inputs.shape(), &[2, 1, 2, 2]);
    assert_eq!(d.labels, vec![1, 0]);
    assert_eq!(&d.inputs.data()[..4], &[0.0, 1.0, 0.0, 1.0]);

    fs::write(&path, "1,0,0.5,0,1\n").unwrap();
    let d: Dataset<f64> = load_csv(&path, 2, 2, 1).unwrap();
    assert_eq!(d.inputs.data(), &[0.0, 0.5, 0.0, 1.0]);
}

#[test]
fn csv_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    for bad in ["1,0,0,0\n", "1,0,0,0,300\n", "1,0,0,0,x\n", "1,0,0,0,-1\n"] {
        fs::write(&path, bad).unwrap();
        assert!(load_csv::<f64>(&path, 2, 2, 1).is_err(), "{bad:?}");
    }
}

fn toy(n: usize) -> Dataset<f64> {
    let data: Vec<f64> = (0..n).map(|i| i as f64).collect();
    Dataset::new(
        Tensor::new(vec![n, 1], data).unwrap(),
        (0..n).map(|i| i % 3).collect(),
        "toy",
        3,
    )
    .unwrap()
}

#[test]
fn holdout_must_leave_training_data() {
    assert!(split_holdout(&toy(5), 5, 0).is_err());
    let (train, hold) = split_holdout(&toy(5), 0, 0).unwrap();
    assert_eq!(train.len(), 5);
    assert!(hold.is_none());
}

proptest! {
    #[test]
    fn holdout_split_is_a_partition(n in 2usize..200, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let k = ((n - 1) as f64 * frac) as usize;
        let d = toy(n);
        let (train, hold) = split_holdout(&d, k, seed).unwrap();
        let mut seen: Vec<usize> = train.inputs.data().iter().map(|&v| v as usize).collect();
        if let Some(h) = &hold {
            prop_assert_eq!(h.len(), k);
            seen.extend(h.inputs.data().iter().map(|&v| v as usize));
        }
        prop_assert_eq!(train.len(), n - k);
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let again = split_holdout(&d, k, seed).unwrap();
        prop_assert_eq!(again.0.inputs.data(), train.inputs.data());
    }
}

//! Loaders on synthetic IDX and CIFAR files, generators and data constants.

use std::fs;
use std::path::Path;

use relu_dynamics::datasets::{self, Labels, CIFAR_RECORD};
use relu_dynamics::Error;

fn write_idx(dir: &Path, n: usize, rows: usize, cols: usize, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
    let mut img = Vec::new();
    img.extend_from_slice(&0x0803u32.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for i in 0..n * rows * cols {
        img.push((i * 37 % 251) as u8 + 1);
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&0x0801u32.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let (ip, lp) = (dir.join("img"), dir.join("lab"));
    fs::write(&ip, img).unwrap();
    fs::write(&lp, lab).unwrap();
    (ip, lp)
}

#[test]
fn idx_files_load_and_normalize() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_idx(dir.path(), 5, 3, 4, &[0, 9, 3, 3, 1]);
    let ds = datasets::load_mnist(&ip, &lp, 4, true).unwrap();
    assert_eq!((ds.n(), ds.d()), (4, 12));
    assert_eq!(ds.labels, Labels::OneHot { classes: 10, index: vec![0, 9, 3, 3] });
    for r in ds.x.row_iter() {
        assert!((r.norm() - 1.0).abs() < 1e-12);
    }
    let raw = datasets::load_mnist(&ip, &lp, 5, false).unwrap();
    // first pixel is byte 1
    assert!((raw.x[(0, 0)] - 1.0 / (255.0 * 12f64.sqrt())).abs() < 1e-15);
    assert!(raw.x.row_iter().all(|r| r.norm() <= 1.0));
}

#[test]
fn idx_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_idx(dir.path(), 3, 2, 2, &[1, 2, 3]);
    assert!(matches!(datasets::load_mnist(&ip, &lp, 4, true), Err(Error::CountExceeds { requested: 4, available: 3 })));
    // swapped files
    assert!(matches!(datasets::load_mnist(&lp, &ip, 1, true), Err(Error::BadMagic { .. })));
    let mut bytes = fs::read(&ip).unwrap();
    bytes.truncate(20);
    fs::write(&ip, bytes).unwrap();
    assert!(matches!(datasets::load_mnist(&ip, &lp, 2, true), Err(Error::Truncated { .. })));
    fs::write(&ip, [0u8, 0]).unwrap();
    assert!(matches!(datasets::load_mnist(&ip, &lp, 1, true), Err(Error::Truncated { .. })));
}

#[test]
fn cifar_batches_load() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("data_batch_1.bin");
    let mut bytes = Vec::new();
    for r in 0..3u8 {
        bytes.push(r * 3);
        bytes.extend((0..CIFAR_RECORD - 1).map(|i| ((i + r as usize) % 200) as u8 + 5));
    }
    fs::write(&p, &bytes).unwrap();
    let ds = datasets::load_cifar10(&p, 3, true).unwrap();
    assert_eq!(ds.d(), 3072);
    assert_eq!(ds.labels, Labels::OneHot { classes: 10, index: vec![0, 3, 6] });
    assert!(matches!(datasets::load_cifar10(&p, 4, true), Err(Error::CountExceeds { .. })));
    bytes.pop();
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(datasets::load_cifar10(&p, 1, true), Err(Error::Truncated { .. })));
}

#[test]
fn zero_image_cannot_be_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_idx(dir.path(), 1, 1, 2, &[0]);
    let mut bytes = fs::read(&ip).unwrap();
    bytes[16] = 0;
    bytes[17] = 0;
    fs::write(&ip, bytes).unwrap();
    assert!(matches!(datasets::load_mnist(&ip, &lp, 1, true), Err(Error::ZeroVector(0))));
}

#[test]
fn orthant_generator_with_antipodal_pairs() {
    let ds = datasets::gen_orthant_separable(40, 30, 1, true).unwrap();
    let rep = datasets::validate_separable(&ds).unwrap();
    assert!(rep.satisfies_4_1_i);
    let mu0 = rep.mu0.unwrap();
    assert!(mu0 > 0.0 && mu0 <= 1.0);
    assert_eq!(ds.digest(), datasets::gen_orthant_separable(40, 30, 1, true).unwrap().digest());
    assert_ne!(ds.digest(), datasets::gen_orthant_separable(40, 30, 2, true).unwrap().digest());
    assert!(datasets::gen_orthant_separable(41, 30, 1, true).is_err());
}

#[test]
fn multiclass_generator_is_concentrated() {
    let ds = datasets::gen_nonnegative_multiclass(30, 10, 3, 4).unwrap();
    assert_eq!(ds.classes(), 3);
    let rep = datasets::validate_concentrated(&ds);
    assert!(rep.satisfies_4_3);
    assert!(rep.s >= 0.0);
}

#[test]
fn v_is_positive_only_for_wide_nets() {
    let ds = datasets::gen_orthant_separable(20, 20, 3, true).unwrap();
    let wide = datasets::compute_v(&ds, 2048.0, 0.01).unwrap();
    assert!(!wide.v_vacuous && wide.v > 0.0);
    assert!(wide.gamma1 > 0.0 && wide.gamma2 > 0.0);
    let narrow = datasets::compute_v(&ds, 8.0, 0.01).unwrap();
    assert!(narrow.v_vacuous);
}

#[test]
fn invalid_labels_are_rejected() {
    let x = nalgebra::DMatrix::from_element(2, 2, 0.5);
    assert!(datasets::LabeledDataset::new(x.clone(), Labels::Binary(vec![-1.0, 1.0]), "").is_err());
    assert!(datasets::LabeledDataset::new(x.clone(), Labels::OneHot { classes: 2, index: vec![0, 2] }, "").is_err());
    let big = nalgebra::DMatrix::from_element(2, 2, 1.0);
    assert!(datasets::LabeledDataset::new(big, Labels::Binary(vec![1.0, -1.0]), "").is_err());
}

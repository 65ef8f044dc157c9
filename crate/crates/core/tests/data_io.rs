use std::fs;
use std::path::Path;

use fedsim::data::{self, Dataset};
use fedsim::Error;
use ndarray::array;

fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, bytes).unwrap();
    p
}

fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out
}

#[test]
fn hand_built_idx_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = header(0x803, &[3, 2, 2]);
    img.extend_from_slice(&[0, 255, 51, 102, 255, 0, 0, 0, 1, 2, 3, 4]);
    let mut lab = header(0x801, &[3]);
    lab.extend_from_slice(&[2, 0, 1]);
    let ds = data::load_idx(write_bytes(dir.path(), "i", &img), write_bytes(dir.path(), "l", &lab)).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.dim(), 4);
    assert_eq!(ds.n_classes, 3);
    assert_eq!(ds.labels, vec![2, 0, 1]);
    assert_eq!(ds.features[[0, 1]], 1.0);
    assert_eq!(ds.features[[0, 2]], 0.2);
    assert_eq!(ds.features[[2, 3]], 4.0 / 255.0);
}

#[test]
fn write_then_load_round_trips_byte_values() {
    let dir = tempfile::tempdir().unwrap();
    let features = array![[0.0, 1.0, 10.0 / 255.0, 0.5], [0.25, 0.75, 1.0, 0.0]];
    let ds = Dataset::new(features, vec![1, 4], 5).unwrap();
    let (i, l) = (dir.path().join("img"), dir.path().join("lab"));
    data::write_idx(&ds, 2, 2, &i, &l).unwrap();
    let back = data::load_idx(&i, &l).unwrap();
    assert_eq!(back.labels, ds.labels);
    for (a, b) in back.features.iter().zip(ds.features.iter()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-15);
    }
    // byte-exact on the second pass
    data::write_idx(&back, 2, 2, dir.path().join("img2"), dir.path().join("lab2")).unwrap();
    assert_eq!(fs::read(&i).unwrap(), fs::read(dir.path().join("img2")).unwrap());
    assert!(data::write_idx(&ds, 3, 2, &i, &l).is_err());
}

fn ingest_offset(e: Error) -> (u64, String) {
    match e {
        Error::Ingest { offset, reason, .. } => (offset, reason),
        other => panic!("expected an ingest error, got {other}"),
    }
}

#[test]
fn malformed_files_report_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let good_img = {
        let mut v = header(0x803, &[2, 1, 2]);
        v.extend_from_slice(&[1, 2, 3, 4]);
        v
    };
    let good_lab = {
        let mut v = header(0x801, &[2]);
        v.extend_from_slice(&[0, 1]);
        v
    };
    let load = |img: &[u8], lab: &[u8]| {
        data::load_idx(write_bytes(dir.path(), "a", img), write_bytes(dir.path(), "b", lab))
    };
    assert!(load(&good_img, &good_lab).is_ok());

    let (off, why) = ingest_offset(load(&header(0x801, &[2, 1, 2]), &good_lab).unwrap_err());
    assert_eq!(off, 0);
    assert!(why.contains("magic"));

    let (off, why) = ingest_offset(load(&good_img[..good_img.len() - 1], &good_lab).unwrap_err());
    assert_eq!(off, 16);
    assert!(why.contains("truncated"));

    let (off, _) = ingest_offset(load(&good_img[..6], &good_lab).unwrap_err());
    assert_eq!(off, 4);

    let mut short_lab = header(0x801, &[3]);
    short_lab.extend_from_slice(&[0, 1, 1]);
    let (off, why) = ingest_offset(load(&good_img, &short_lab).unwrap_err());
    assert_eq!(off, 4);
    assert!(why.contains("label count"));

    let (off, _) = ingest_offset(load(&good_img, &good_lab[..9]).unwrap_err());
    assert_eq!(off, 8);

    let missing = data::load_idx(dir.path().join("nope"), dir.path().join("b")).unwrap_err();
    assert!(matches!(missing, Error::Io(_)));
}

#[test]
fn bundled_mnist_subset_is_balanced() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset");
    let train = data::load_idx(root.join("train-images-idx3-ubyte"), root.join("train-labels-idx1-ubyte")).unwrap();
    let test = data::load_idx(root.join("t10k-images-idx3-ubyte"), root.join("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!((train.len(), train.dim(), train.n_classes), (2000, 784, 10));
    assert_eq!(test.len(), 1000);
    for c in 0..10 {
        assert_eq!(train.labels.iter().filter(|&&l| l == c).count(), 200);
        assert_eq!(test.labels.iter().filter(|&&l| l == c).count(), 100);
    }
    assert!(train.features.iter().all(|v| (0.0..=1.0).contains(v)));
}

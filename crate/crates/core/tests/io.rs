mod common;

use std::fs;

use common::*;
use gqa2mla::io::tensor_file::{decode, encode, MAGIC};
use gqa2mla::io::{
    load_bundle, load_tensor, read_manifest, save_bundle, save_tensor, synth_calib, synth_gqa, synth_gqa_kv_split,
    CalibStructure,
};
use gqa2mla::linalg::{numerical_rank, singular_values};
use gqa2mla::pipeline::{run_conversion, ConversionOptions};
use gqa2mla::rewrite::{gqa_to_mla_factorized, merge_key_heads};
use gqa2mla::{AnyLayer, Dtype, Error, Matrix};

#[test]
fn tensor_roundtrips() {
    let empty = Matrix::<f64>::zeros(0, 0);
    assert_eq!(decode::<f64>(&encode(&empty)).unwrap(), empty);
    let m = gaussian(&mut rng(1), 3, 5, 1.0);
    let bytes = encode(&m);
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(bytes.len(), 4 + 2 + 1 + 1 + 16 + 15 * 8);
    assert_eq!(decode::<f64>(&bytes).unwrap(), m);
    let small = m.cast::<f32>();
    assert_eq!(decode::<f32>(&encode(&small)).unwrap(), small);
    // widening is exact
    assert_eq!(decode::<f64>(&encode(&small)).unwrap(), small.cast::<f64>());
}

#[test]
fn corrupt_tensors_are_rejected() {
    let bytes = encode(&gaussian(&mut rng(2), 2, 3, 1.0));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode::<f64>(&bad), Err(Error::Format(_))));
    assert!(matches!(
        decode::<f64>(&bytes[..bytes.len() - 1]),
        Err(Error::Format(_))
    ));
    assert!(matches!(decode::<f64>(&bytes[..10]), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode::<f64>(&long), Err(Error::Format(_))));
    let mut dtype = bytes.clone();
    dtype[6] = 99;
    assert!(matches!(decode::<f64>(&dtype), Err(Error::Format(_))));
    let mut version = bytes;
    version[4] = 7;
    assert!(matches!(decode::<f64>(&version), Err(Error::Format(_))));
}

#[test]
fn tensor_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.mlaf");
    let m = gaussian(&mut rng(3), 4, 2, 1.0);
    save_tensor(&path, &m).unwrap();
    assert_eq!(load_tensor::<f64>(&path).unwrap(), m);
    let missing = load_tensor::<f64>(dir.path().join("nope.mlaf")).unwrap_err();
    assert!(missing.is_io());
}

fn roundtrip(layer: AnyLayer<f64>, base: Option<f64>) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_bundle(dir.path(), &layer, base).unwrap();
    assert_eq!(manifest.kind, layer.kind());
    assert_eq!(manifest.dtype, Dtype::F64);
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
    assert_eq!(load_bundle::<f64>(dir.path()).unwrap(), layer);
}

#[test]
fn bundles_roundtrip_every_kind() {
    let src = synth_gqa::<f64>(4, 32, 4, 2, 10000.0).unwrap();
    roundtrip(AnyLayer::Gqa(src.clone()), Some(10000.0));
    roundtrip(AnyLayer::MergedGqa(merge_key_heads(&src)), None);
    roundtrip(AnyLayer::MlaFactorized(gqa_to_mla_factorized(&src)), None);
    let x = synth_calib(4, 160, 32, CalibStructure::Iid).unwrap();
    let mut opts = ConversionOptions::new(12);
    let conv = run_conversion(&src, &x, &opts).unwrap();
    roundtrip(AnyLayer::Mla(conv.mla), Some(10000.0));
    opts.r_q = Some(10);
    let conv = run_conversion(&src, &x, &opts).unwrap();
    assert!(conv.mla.query.rank().is_some());
    roundtrip(AnyLayer::Mla(conv.mla), None);
}

#[test]
fn f32_bundle_loads_as_f64() {
    let src = synth_gqa::<f32>(5, 16, 2, 1, 10000.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(dir.path(), &AnyLayer::Gqa(src.clone()), None).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap().dtype, Dtype::F32);
    match load_bundle::<f64>(dir.path()).unwrap() {
        AnyLayer::Gqa(l) => assert_eq!(l.wq, src.wq.cast::<f64>()),
        other => panic!("loaded {}", other.kind()),
    }
}

#[test]
fn bundle_paths_stay_inside() {
    let src = synth_gqa::<f64>(6, 16, 2, 1, 10000.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(dir.path(), &AnyLayer::Gqa(src), None).unwrap();
    let path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replace("\"wq.mlaf\"", "\"../wq.mlaf\"")).unwrap();
    assert!(matches!(load_bundle::<f64>(dir.path()), Err(Error::Format(_))));
}

#[test]
fn bundle_with_missing_tensor_fails() {
    let src = synth_gqa::<f64>(7, 16, 2, 1, 10000.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(dir.path(), &AnyLayer::Gqa(src), None).unwrap();
    fs::remove_file(dir.path().join("wo.mlaf")).unwrap();
    assert!(load_bundle::<f64>(dir.path()).unwrap_err().is_io());
    assert!(read_manifest(dir.path().join("absent")).unwrap_err().is_io());
}

#[test]
fn synthesis_is_deterministic() {
    let a = synth_gqa::<f64>(8, 32, 4, 2, 10000.0).unwrap();
    assert_eq!(a, synth_gqa::<f64>(8, 32, 4, 2, 10000.0).unwrap());
    assert_ne!(a, synth_gqa::<f64>(9, 32, 4, 2, 10000.0).unwrap());
    let x = synth_calib::<f64>(8, 10, 32, CalibStructure::KeyDominant(2.0)).unwrap();
    assert_eq!(
        x,
        synth_calib::<f64>(8, 10, 32, CalibStructure::KeyDominant(2.0)).unwrap()
    );
    assert!(synth_gqa::<f64>(8, 30, 4, 2, 10000.0).is_err());
    assert!(synth_gqa::<f64>(8, 32, 4, 3, 10000.0).is_err());
}

#[test]
fn synthetic_weights_have_bounded_spectrum() {
    for seed in 0..20 {
        let l = synth_gqa::<f64>(seed, 64, 8, 2, 10000.0).unwrap();
        let (rows, cols) = l.wq.shape();
        let top = singular_values(&l.wq)[0];
        let bound = 1.5 * ((rows as f64 / cols as f64).sqrt() + 1.0);
        assert!(top <= bound, "seed {seed}: {top}");
    }
}

#[test]
fn kv_split_layer_reads_disjoint_halves() {
    let l = synth_gqa_kv_split::<f64>(10, 32, 4, 2, 10000.0).unwrap();
    for r in 0..l.wk.rows() {
        assert!(l.wk.row(r)[16..].iter().all(|&v| v == 0.0));
        assert!(l.wv.row(r)[..16].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn iid_calibration_is_centred() {
    let n = 1000;
    let x = synth_calib::<f64>(11, n, 6, CalibStructure::Iid).unwrap();
    let tol = 4.0 / (n as f64).sqrt();
    assert!(x.column_means().iter().all(|m| m.abs() <= tol));
}

#[test]
fn low_rank_calibration_has_requested_rank() {
    let x = synth_calib::<f64>(12, 50, 8, CalibStructure::LowRank(2)).unwrap();
    assert_eq!(numerical_rank(&x, 1e-8), 2);
    assert!(synth_calib::<f64>(12, 50, 8, CalibStructure::LowRank(9)).is_err());
    assert!(synth_calib::<f64>(12, 0, 8, CalibStructure::Iid).is_err());
    assert!(synth_calib::<f64>(12, 5, 8, CalibStructure::KeyDominant(-1.0)).is_err());
}

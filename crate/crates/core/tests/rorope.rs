mod common;

use common::*;
use gqa2mla::io::{random_rotation_set, synth_calib, synth_gqa, CalibStructure};
use gqa2mla::linalg::sym_eig;
use gqa2mla::rewrite::merge_key_heads;
use gqa2mla::rorope::{
    apply_rotations, collect_key_stats, fold_frequencies, group_variance_check, key_norm_rows, leading_energy,
    merge_stats, solve_rotations, split_rope_nope, FreqStats, RotationSet,
};
use gqa2mla::{Error, Matrix};

fn setup(seed: u64, h: usize, g: usize, d: usize) -> (gqa2mla::Merged64, Matrix<f64>) {
    let src = synth_gqa::<f64>(seed, h * d, h, g, 10000.0).unwrap();
    let x = synth_calib(seed + 100, 200, h * d, CalibStructure::Iid).unwrap();
    (merge_key_heads(&src), x)
}

#[test]
fn stats_merge_matches_single_pass() {
    let (m, x) = setup(1, 4, 2, 8);
    let whole = collect_key_stats(&m, &x, 2).unwrap();
    let a = collect_key_stats(&m, &x.slice_rows(0..70), 2).unwrap();
    let b = collect_key_stats(&m, &x.slice_rows(70..200), 2).unwrap();
    let ab = merge_stats(&a, &b).unwrap();
    assert_eq!(ab.sample_count, 200);
    for (p, q) in ab
        .sigma_x
        .iter()
        .chain(&ab.sigma_y)
        .zip(whole.sigma_x.iter().chain(&whole.sigma_y))
    {
        assert!(max_abs_diff(p, q) <= 1e-12 * q.max_abs().max(1.0));
    }
    let ba = merge_stats(&b, &a).unwrap();
    assert_eq!(ab, ba);
    let empty = FreqStats::empty(2, 2, 8).unwrap();
    assert_eq!(merge_stats(&a, &empty).unwrap(), a);
}

#[test]
fn stats_merge_rejects_mismatch() {
    let (m, x) = setup(2, 4, 2, 8);
    let a = collect_key_stats(&m, &x, 1).unwrap();
    let b = collect_key_stats(&m, &x, 2).unwrap();
    assert!(merge_stats(&a, &b).is_err());
}

#[test]
fn stats_are_psd() {
    let (m, x) = setup(3, 8, 4, 8);
    let s = collect_key_stats(&m, &x, 1).unwrap();
    assert_eq!(s.num_groups(), 4);
    for sigma in s.sigma_x.iter().chain(&s.sigma_y) {
        assert!(sym_eig(sigma).unwrap().eigenvalues.iter().all(|&v| v >= -1e-10));
    }
}

#[test]
fn stats_input_errors() {
    let (m, x) = setup(4, 4, 2, 8);
    assert!(matches!(
        collect_key_stats(&m, &x.slice_rows(0..0), 1),
        Err(Error::InsufficientSamples { .. })
    ));
    assert!(collect_key_stats(&m, &x, 3).is_err());
}

#[test]
fn pca_captures_top_eigenvalues() {
    let (m, x) = setup(5, 4, 4, 8);
    let s = collect_key_stats(&m, &x, 2).unwrap();
    let rot = solve_rotations(&s).unwrap();
    assert!(rot.max_defect() < 1e-12);
    for (grp, u) in rot.rotations.iter().enumerate() {
        let sum = s.sigma_x[grp].add(&s.sigma_y[grp]);
        let eig = sym_eig(&sum).unwrap();
        for k in 1..=u.cols() {
            let trace: f64 = (0..k).map(|a| dot(&u.column(a), &mv(&sum, &u.column(a)))).sum();
            let want: f64 = eig.eigenvalues[..k].iter().sum();
            assert!((trace - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }
}

#[test]
fn ascending_diagonal_gives_reversal() {
    let mut s = FreqStats::<f64>::empty(1, 3, 2).unwrap();
    s.sigma_x[0] = Matrix::diag(&[1.0, 2.0, 3.0]);
    s.sample_count = 1;
    let u = &solve_rotations(&s).unwrap().rotations[0];
    for a in 0..3 {
        assert_eq!(u.get(2 - a, a).abs(), 1.0);
    }
}

#[test]
fn identity_rotation_is_noop() {
    let (m, _) = setup(6, 4, 2, 8);
    let rot = RotationSet::identity(1, 2, 8).unwrap();
    assert_eq!(apply_rotations(&m, &rot).unwrap(), m);
}

#[test]
fn any_orthogonal_rotation_preserves_logits() {
    for seed in 0..10 {
        let (m, x) = setup(10 + seed, 8, 4, 8);
        let folded = fold_frequencies(&m, 2).unwrap();
        let rot = random_rotation_set(seed, 2, 4, 8).unwrap();
        let r = apply_rotations(&folded, &rot).unwrap();
        let seq = x.slice_rows(0..12);
        for (a, b) in folded.logits(&seq).unwrap().iter().zip(&r.logits(&seq).unwrap()) {
            assert!(max_abs_diff(a, b) <= 1e-10);
        }
    }
}

#[test]
fn inverse_rotation_restores_weights() {
    let (m, _) = setup(7, 4, 2, 8);
    let rot = random_rotation_set(7, 1, 2, 8).unwrap();
    let back = apply_rotations(&apply_rotations(&m, &rot).unwrap(), &rot.inverse()).unwrap();
    assert!(max_abs_diff(&back.wk, &m.wk) <= 1e-12);
    assert!(max_abs_diff(&back.wuk, &m.wuk) <= 1e-12);
}

#[test]
fn rotation_rejects_bad_input() {
    let (m, _) = setup(8, 4, 2, 8);
    let mut rot = random_rotation_set(8, 1, 2, 8).unwrap();
    let v = rot.rotations[1].get(0, 0);
    rot.rotations[1].set(0, 0, v + 1e-6);
    assert!(matches!(apply_rotations(&m, &rot), Err(Error::NotOrthonormal(_))));
    // mixing two frequencies needs a folded schedule
    let wide = random_rotation_set(8, 2, 2, 8).unwrap();
    assert!(apply_rotations(&m, &wide).is_err());
    assert!(apply_rotations(&fold_frequencies(&m, 2).unwrap(), &wide).is_ok());
}

#[test]
fn folding_is_exact_when_frequencies_coincide() {
    let src = synth_gqa::<f64>(9, 32, 4, 2, 1.0).unwrap();
    let m = merge_key_heads(&src);
    let f = fold_frequencies(&m, 4).unwrap();
    let x = gaussian(&mut rng(9), 10, 32, 1.0);
    assert_eq!(f.forward(&x).unwrap(), m.forward(&x).unwrap());
}

#[test]
fn folding_is_lossy_in_general() {
    let (m, x) = setup(10, 4, 2, 8);
    let f = fold_frequencies(&m, 2).unwrap();
    let seq = x.slice_rows(0..16);
    assert!(max_abs_diff(&f.forward(&seq).unwrap(), &m.forward(&seq).unwrap()) > 1e-6);
}

#[test]
fn pca_rotation_concentrates_energy() {
    let (m, x) = setup(11, 8, 4, 8);
    let s = collect_key_stats(&m, &x, 1).unwrap();
    let pca = solve_rotations(&s).unwrap();
    let id = RotationSet::identity(1, 4, 8).unwrap();
    let total: f64 = s.rms().iter().map(|r| r * r).sum();
    let before = leading_energy(&s, &id, 1).unwrap();
    let after = leading_energy(&s, &pca, 1).unwrap();
    assert!(after > before);
    assert!((leading_energy(&s, &pca, 4).unwrap() - total).abs() <= 1e-10 * total);
    let rows = key_norm_rows(&s, &pca, &s, &pca).unwrap();
    assert_eq!(rows.len(), 32);
    let lead: f64 = rows[..8].iter().map(|r| r.rorope * r.rorope).sum();
    assert!((lead - after).abs() <= 1e-10 * after);
}

#[test]
fn split_is_exact_without_energy_outside_first_head() {
    let mut src = synth_gqa::<f64>(12, 32, 8, 4, 10000.0).unwrap();
    for r in 4..16 {
        src.wk.row_mut(r).fill(0.0);
    }
    let m = merge_key_heads(&src);
    let x = synth_calib(112, 200, 32, CalibStructure::Iid).unwrap();
    let rot = solve_rotations(&collect_key_stats(&m, &x, 1).unwrap()).unwrap();
    let rotated = apply_rotations(&m, &rot).unwrap();
    let split = split_rope_nope(&rotated, 1).unwrap();
    assert_eq!(split.rope_dim(), 4);
    assert_eq!(split.nope_dim(), 12);
    let seq = x.slice_rows(0..16);
    assert!(max_abs_diff(&split.forward(&seq).unwrap(), &m.forward(&seq).unwrap()) <= 1e-10);
}

#[test]
fn split_error_shrinks_with_more_rope_heads() {
    let (m, x) = setup(13, 8, 4, 8);
    let rot = solve_rotations(&collect_key_stats(&m, &x, 1).unwrap()).unwrap();
    let rotated = apply_rotations(&m, &rot).unwrap();
    let seq = x.slice_rows(0..32);
    let reference = rotated.forward(&seq).unwrap();
    let errs: Vec<f64> = (0..=4)
        .map(|n| {
            rms_diff(
                &split_rope_nope(&rotated, n).unwrap().forward(&seq).unwrap(),
                &reference,
            )
        })
        .collect();
    assert!(errs[1] > 0.0);
    assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
    assert!(errs[4] <= 1e-12);
    assert!(split_rope_nope(&rotated, 5).is_err());
}

#[test]
fn full_fold_single_group_keeps_first_frequency() {
    let src = synth_gqa::<f64>(14, 8, 1, 1, 10000.0).unwrap();
    let m = merge_key_heads(&src);
    let first = m.rope.thetas()[0];
    let folded = fold_frequencies(&m, 4).unwrap();
    let x = synth_calib(114, 64, 8, CalibStructure::Iid).unwrap();
    let s = collect_key_stats(&folded, &x, 4).unwrap();
    assert_eq!(s.num_groups(), 1);
    let rotated = apply_rotations(&folded, &solve_rotations(&s).unwrap()).unwrap();
    let split = split_rope_nope(&rotated, 1).unwrap();
    assert!(split.rope.thetas().iter().all(|&t| t == first));
}

#[test]
fn random_groups_gain_variance() {
    let (v1, v2) = group_variance_check(3, 4, 50, 0).unwrap();
    assert!(v2 > v1);
    assert!(group_variance_check(2, 3, 1, 0).is_err());
}

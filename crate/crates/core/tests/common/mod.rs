//! Hand-written reference implementations shared by the integration tests.
//!
//! Everything here is deliberately naive: scalar loops, explicit sin/cos,
//! no reuse of library kernels.

#![allow(dead_code)]

use gqa2mla::attention::GqaLayer;
use gqa2mla::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e57)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `W x` for a row-major matrix.
pub fn mv(w: &Matrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| dot(w.row(r), x)).collect()
}

/// Interleaved-pair rotation by `pos · θ_l`.
pub fn rope(x: &[f64], pos: usize, thetas: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    for (l, &theta) in thetas.iter().enumerate() {
        let a = pos as f64 * theta;
        let (re, im) = (x[2 * l], x[2 * l + 1]);
        out[2 * l] = re * a.cos() - im * a.sin();
        out[2 * l + 1] = re * a.sin() + im * a.cos();
    }
    out
}

pub fn standard_thetas(d: usize, base: f64) -> Vec<f64> {
    (0..d / 2).map(|l| base.powf(-2.0 * l as f64 / d as f64)).collect()
}

/// Textbook causal attention for one head.
pub fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    (0..q.len())
        .map(|t| {
            let s: Vec<f64> = (0..=t).map(|j| dot(&q[t], &k[j]) * scale).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut o = vec![0.0; v[0].len()];
            for (j, w) in e.iter().enumerate() {
                for (oi, vi) in o.iter_mut().zip(&v[j]) {
                    *oi += w / z * vi;
                }
            }
            o
        })
        .collect()
}

/// Reference GQA forward; `use_rope = false` skips positional rotation.
pub fn gqa_oracle(layer: &GqaLayer<f64>, x: &Matrix<f64>, use_rope: bool) -> Matrix<f64> {
    let (h, g, d) = (layer.heads, layer.groups, layer.head_dim);
    let thetas = layer.rope.thetas().to_vec();
    let len = x.rows();
    let band = |w: &Matrix<f64>, i: usize| w.slice_rows(i * d..(i + 1) * d);
    let mut concat = vec![vec![0.0; h * d]; len];
    for i in 0..h {
        let grp = i / (h / g);
        let (wq, wk, wv) = (band(&layer.wq, i), band(&layer.wk, grp), band(&layer.wv, grp));
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for t in 0..len {
            let (qt, kt) = (mv(&wq, x.row(t)), mv(&wk, x.row(t)));
            if use_rope {
                q.push(rope(&qt, t, &thetas));
                k.push(rope(&kt, t, &thetas));
            } else {
                q.push(qt);
                k.push(kt);
            }
            v.push(mv(&wv, x.row(t)));
        }
        let o = attend(&q, &k, &v, 1.0 / (d as f64).sqrt());
        for t in 0..len {
            concat[t][i * d..(i + 1) * d].copy_from_slice(&o[t]);
        }
    }
    Matrix::from_fn(len, layer.hidden, |t, c| dot(layer.wo.row(c), &concat[t]))
}

pub fn max_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn rms_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    (s / a.data().len() as f64).sqrt()
}

/// Random `h`, `g | h`, even `d` with `h·d ≤ max_hidden`.
pub fn random_shape(rng: &mut ChaCha8Rng, max_hidden: usize) -> (usize, usize, usize) {
    loop {
        let h = [1, 2, 4, 8][rng.random_range(0..4)];
        let divisors: Vec<usize> = (1..=h).filter(|g| h % g == 0).collect();
        let g = divisors[rng.random_range(0..divisors.len())];
        let d = 2 * rng.random_range(1..=4);
        if h * d <= max_hidden {
            return (h, g, d);
        }
    }
}

/// Divisors of `n`.
pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|m| n % m == 0).collect()
}

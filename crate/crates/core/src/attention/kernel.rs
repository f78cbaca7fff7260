//! Causal softmax attention over row-major sequences.
//!
//! Query head `i` reads key/value head `i / (heads / kv_heads)`, which covers
//! MHA (`kv_heads == heads`), GQA and MQA (`kv_heads == 1`).

use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, Matrix};

/// Max-subtracted softmax in place.
pub fn softmax_in_place<T: Scalar>(scores: &mut [T]) {
    let max = scores.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
    let mut total = T::zero();
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total = total + *s;
    }
    for s in scores.iter_mut() {
        *s = *s / total;
    }
}

/// Scaled causal scores per query head; entries above the diagonal are zero.
pub fn causal_scores<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    heads: usize,
    kv_heads: usize,
    scale: T,
) -> Vec<Matrix<T>> {
    let len = q.rows();
    assert_eq!(k.rows(), len);
    let dk = q.cols() / heads;
    assert_eq!(k.cols(), kv_heads * dk, "key width");
    let per_group = heads / kv_heads;
    (0..heads)
        .map(|i| {
            let kv = i / per_group;
            Matrix::from_fn(len, len, |t, j| {
                if j > t {
                    T::zero()
                } else {
                    let qi = &q.row(t)[i * dk..(i + 1) * dk];
                    let kj = &k.row(j)[kv * dk..(kv + 1) * dk];
                    dot(qi, kj) * scale
                }
            })
        })
        .collect()
}

/// Causal attention output `len × (heads · dv)`.
pub fn causal_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    kv_heads: usize,
    scale: T,
) -> Matrix<T> {
    let len = q.rows();
    assert_eq!(k.rows(), len);
    assert_eq!(v.rows(), len);
    assert!(heads % kv_heads == 0, "heads must be a multiple of kv_heads");
    let dk = q.cols() / heads;
    let dv = v.cols() / kv_heads;
    assert_eq!(k.cols(), kv_heads * dk, "key width");
    let per_group = heads / kv_heads;
    let mut out = Matrix::zeros(len, heads * dv);
    let mut scores = Vec::with_capacity(len);
    for t in 0..len {
        for i in 0..heads {
            let kv = i / per_group;
            let qi = &q.row(t)[i * dk..(i + 1) * dk];
            scores.clear();
            for j in 0..=t {
                scores.push(dot(qi, &k.row(j)[kv * dk..(kv + 1) * dk]) * scale);
            }
            softmax_in_place(&mut scores);
            let o = &mut out.row_mut(t)[i * dv..(i + 1) * dv];
            for (j, &p) in scores.iter().enumerate() {
                axpy(o, p, &v.row(j)[kv * dv..(kv + 1) * dv]);
            }
        }
    }
    out
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::AttentionLayer;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Output differences between two layers over a set of sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceSummary {
    pub sequences: usize,
    pub max_abs: f64,
    /// `max_abs` divided by the largest reference output magnitude.
    pub max_rel: f64,
    /// Root-mean-square difference over all outputs.
    pub rms: f64,
    /// Largest absolute difference at each position.
    pub per_position: Vec<f64>,
    pub tolerance: f64,
    pub within_tolerance: bool,
}

/// Splits a token stream into consecutive `seq_len` sequences, dropping the tail.
pub fn split_sequences<T: Scalar>(x: &Matrix<T>, seq_len: usize) -> Result<Vec<Matrix<T>>> {
    if seq_len == 0 {
        return Err(Error::config("sequence length must be positive"));
    }
    Ok((0..x.rows() / seq_len)
        .map(|s| x.slice_rows(s * seq_len..(s + 1) * seq_len))
        .collect())
}

/// Compares precomputed outputs; `reference` scales the relative error.
pub fn compare_outputs<T: Scalar>(
    reference: &[Matrix<T>],
    other: &[Matrix<T>],
    tol: f64,
) -> Result<EquivalenceSummary> {
    if reference.len() != other.len() {
        return Err(Error::shape("different number of sequences"));
    }
    let mut per_position: Vec<f64> = Vec::new();
    let (mut max_abs, mut scale, mut sq, mut count) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for (a, b) in reference.iter().zip(other) {
        if a.shape() != b.shape() {
            return Err(Error::shape("output shapes differ"));
        }
        if per_position.len() < a.rows() {
            per_position.resize(a.rows(), 0.0);
        }
        for t in 0..a.rows() {
            for (&u, &v) in a.row(t).iter().zip(b.row(t)) {
                let diff = (u - v).abs().to_f64_lossy();
                per_position[t] = per_position[t].max(diff);
                max_abs = max_abs.max(diff);
                scale = scale.max(u.abs().to_f64_lossy());
                sq += diff * diff;
                count += 1;
            }
        }
    }
    let max_rel = if scale > 0.0 { max_abs / scale } else { max_abs };
    Ok(EquivalenceSummary {
        sequences: reference.len(),
        max_abs,
        max_rel,
        rms: if count > 0 { (sq / count as f64).sqrt() } else { 0.0 },
        per_position,
        tolerance: tol,
        within_tolerance: max_abs <= tol,
    })
}

pub fn forward_all<T: Scalar>(layer: &dyn AttentionLayer<T>, seqs: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
    seqs.iter().map(|x| layer.forward(x)).collect()
}

/// Runs both layers on every sequence and summarises the differences.
pub fn verify_equivalence<T: Scalar>(
    a: &dyn AttentionLayer<T>,
    b: &dyn AttentionLayer<T>,
    seqs: &[Matrix<T>],
    tol: f64,
) -> Result<EquivalenceSummary> {
    if a.hidden() != b.hidden() {
        return Err(Error::shape(format!(
            "hidden sizes differ: {} vs {}",
            a.hidden(),
            b.hidden()
        )));
    }
    compare_outputs(&forward_all(a, seqs)?, &forward_all(b, seqs)?, tol)
}

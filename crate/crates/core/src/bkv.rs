//! Key/value balancing, joint low-rank KV compression and MLA assembly.

use serde::{Deserialize, Serialize};

use crate::attention::{MlaLayer, QueryProjection};
use crate::error::{Error, Result};
use crate::linalg::{covariance, sym_eig};
use crate::rewrite::check_width;
use crate::rorope::SplitKeyLayer;
use crate::scalar::Scalar;
use crate::tensor::{norm2, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceFactor {
    pub alpha: f64,
    pub mean_knope_norm: f64,
    pub mean_v_norm: f64,
}

fn mean_row_norm<T: Scalar>(m: &Matrix<T>) -> f64 {
    let total: f64 = (0..m.rows()).map(|t| norm2(m.row(t)).to_f64_lossy()).sum();
    total / m.rows() as f64
}

/// Ratio of mean NoPE-key norm to mean value norm over the stream.
pub fn compute_alpha<T: Scalar>(split: &SplitKeyLayer<T>, x: &Matrix<T>) -> Result<BalanceFactor> {
    if x.rows() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    check_width(x, split.hidden)?;
    let mean_knope_norm = mean_row_norm(&x.matmul_t(&split.wdk_nope));
    let mean_v_norm = mean_row_norm(&x.matmul_t(&split.wdv));
    if mean_v_norm == 0.0 {
        return Err(Error::Degenerate("values have zero norm".into()));
    }
    let alpha = mean_knope_norm / mean_v_norm;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Degenerate(format!("balance factor {alpha} is not positive")));
    }
    Ok(BalanceFactor {
        alpha,
        mean_knope_norm,
        mean_v_norm,
    })
}

/// Divides the NoPE key projection by `α` and multiplies its query side by `α`.
pub fn balance<T: Scalar>(split: &SplitKeyLayer<T>, factor: &BalanceFactor) -> Result<SplitKeyLayer<T>> {
    let a = factor.alpha;
    if !a.is_finite() {
        return Err(Error::NonFinite("balance factor"));
    }
    if a <= 0.0 {
        return Err(Error::Degenerate(format!("balance factor {a} is not positive")));
    }
    let a = T::lit(a);
    let mut out = split.clone();
    out.wdk_nope = split.wdk_nope.scale(T::one() / a);
    out.wuk_nope = split.wuk_nope.scale(a);
    out.alpha = split.alpha * a;
    Ok(out)
}

/// One row of the key/value norm table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvNormRow {
    pub component: String,
    pub pre_balance: f64,
    pub post_balance: f64,
}

pub fn kv_norm_rows(before: &BalanceFactor, after: &BalanceFactor) -> Vec<KvNormRow> {
    vec![
        KvNormRow {
            component: "k_nope".into(),
            pre_balance: before.mean_knope_norm,
            post_balance: after.mean_knope_norm,
        },
        KvNormRow {
            component: "v".into(),
            pre_balance: before.mean_v_norm,
            post_balance: after.mean_v_norm,
        },
    ]
}

/// Orthonormal basis for the concatenated `[k_nope; v]` activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KvPcaBasis<T> {
    /// Mean of the fitted activations; zero for weight-based bases.
    pub mean: Vec<T>,
    /// `(nope + gd) × r_kv`
    pub basis: Matrix<T>,
    /// Full spectrum, descending.
    pub eigenvalues: Vec<T>,
    /// Number of leading coordinates that are NoPE keys.
    pub key_rows: usize,
    pub captured_energy_fraction: f64,
}

impl<T: Scalar> KvPcaBasis<T> {
    pub fn r_kv(&self) -> usize {
        self.basis.cols()
    }

    pub fn key_part(&self) -> Matrix<T> {
        self.basis.slice_rows(0..self.key_rows)
    }

    pub fn value_part(&self) -> Matrix<T> {
        self.basis.slice_rows(self.key_rows..self.basis.rows())
    }

    /// `c̃ = R Rᵀ (c − μ) + μ` per row.
    pub fn reconstruct(&self, c: &Matrix<T>) -> Matrix<T> {
        let centered = c.sub_row_vector(&self.mean);
        let neg: Vec<T> = self.mean.iter().map(|&m| -m).collect();
        centered.matmul(&self.basis).matmul_t(&self.basis).sub_row_vector(&neg)
    }

    /// Relative Frobenius reconstruction error of the key and value blocks.
    pub fn reconstruction_error(&self, c: &Matrix<T>) -> (f64, f64) {
        let rec = self.reconstruct(c);
        let w = c.cols();
        let rel = |range: std::ops::Range<usize>| {
            let truth = c.slice_cols(range.clone());
            let denom = truth.frobenius().to_f64_lossy();
            let num = truth.sub(&rec.slice_cols(range)).frobenius().to_f64_lossy();
            if denom == 0.0 {
                num
            } else {
                num / denom
            }
        };
        (rel(0..self.key_rows), rel(self.key_rows..w))
    }
}

/// Concatenated `[W_dk_nope x; W_dv x]` activations, one row per token.
pub fn kv_activations<T: Scalar>(split: &SplitKeyLayer<T>, x: &Matrix<T>) -> Matrix<T> {
    Matrix::hstack(&[&x.matmul_t(&split.wdk_nope), &x.matmul_t(&split.wdv)])
}

fn check_rank(r_kv: usize, dim: usize) -> Result<()> {
    if r_kv == 0 || r_kv > dim {
        return Err(Error::config(format!("r_kv {r_kv} outside 1..={dim}")));
    }
    Ok(())
}

fn basis_from_spectrum<T: Scalar>(s: &Matrix<T>, mean: Vec<T>, r_kv: usize, key_rows: usize) -> Result<KvPcaBasis<T>> {
    let eig = sym_eig(s)?;
    let total: f64 = eig.eigenvalues.iter().map(|v| v.to_f64_lossy().max(0.0)).sum();
    let kept: f64 = eig.eigenvalues[..r_kv].iter().map(|v| v.to_f64_lossy().max(0.0)).sum();
    let captured_energy_fraction = if total > 0.0 { (kept / total).min(1.0) } else { 1.0 };
    Ok(KvPcaBasis {
        mean,
        basis: eig.leading_vectors(r_kv),
        eigenvalues: eig.eigenvalues,
        key_rows,
        captured_energy_fraction,
    })
}

/// PCA of already collected activations `c` (`n × (key_rows + value dims)`).
pub fn pca_basis<T: Scalar>(c: &Matrix<T>, r_kv: usize, key_rows: usize) -> Result<KvPcaBasis<T>> {
    check_rank(r_kv, c.cols())?;
    let needed = r_kv.max(2);
    if c.rows() < needed {
        return Err(Error::InsufficientSamples { needed, got: c.rows() });
    }
    let mean = c.column_means();
    let cov = covariance(&c.sub_row_vector(&mean))?;
    basis_from_spectrum(&cov, mean, r_kv, key_rows)
}

/// Top-`r_kv` principal directions of the centered `[k_nope; v]` activations.
pub fn joint_kv_pca<T: Scalar>(split: &SplitKeyLayer<T>, x: &Matrix<T>, r_kv: usize) -> Result<KvPcaBasis<T>> {
    check_width(x, split.hidden)?;
    pca_basis(&kv_activations(split, x), r_kv, split.nope_dim())
}

/// Basis from the stacked projection weights alone, `eig(W Wᵀ)`.
pub fn weight_kv_pca<T: Scalar>(split: &SplitKeyLayer<T>, r_kv: usize) -> Result<KvPcaBasis<T>> {
    let w = Matrix::vstack(&[&split.wdk_nope, &split.wdv]);
    check_rank(r_kv, w.rows())?;
    basis_from_spectrum(&w.matmul_t(&w), vec![T::zero(); w.rows()], r_kv, split.nope_dim())
}

/// Compressed latent projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct KvDecomposition<T> {
    /// `r_kv × D`
    pub wdkv: Matrix<T>,
    /// `hd × r_kv`
    pub wuk: Matrix<T>,
    /// `hd × r_kv`
    pub wuv: Matrix<T>,
    /// Value-side offset `(I − R Rᵀ) μ` restricted to value rows, length `gd`.
    ///
    /// The key-side offset shifts every logit of a query by the same amount
    /// and is dropped.
    pub value_offset: Vec<T>,
}

pub fn decompose_projections<T: Scalar>(split: &SplitKeyLayer<T>, basis: &KvPcaBasis<T>) -> Result<KvDecomposition<T>> {
    let nope = split.nope_dim();
    let gd = split.groups * split.head_dim;
    if basis.key_rows != nope || basis.basis.rows() != nope + gd {
        return Err(Error::shape(format!(
            "basis has {} rows ({} key), layer needs {} ({nope} key)",
            basis.basis.rows(),
            basis.key_rows,
            nope + gd
        )));
    }
    let w = Matrix::vstack(&[&split.wdk_nope, &split.wdv]);
    let rk = basis.key_part();
    let rv = basis.value_part();
    let proj_mean = basis.basis.t_matvec(&basis.mean);
    let rec_mean = rv.matvec(&proj_mean);
    let value_offset = basis.mean[nope..].iter().zip(&rec_mean).map(|(&m, &r)| m - r).collect();
    Ok(KvDecomposition {
        wdkv: basis.basis.t_matmul(&w),
        wuk: split.wuk_nope.matmul(&rk),
        wuv: split.wuv.matmul(&rv),
        value_offset,
    })
}

/// Builds the final layer with `d_nope = d` and `d^R = n_keep·d`.
///
/// The MLA scale is `1/√(d + d^R)`; queries are multiplied by
/// `√((d + d^R)/d)` so logits keep the original `1/√d` scaling.
pub fn assemble_mla<T: Scalar>(split: &SplitKeyLayer<T>, dec: &KvDecomposition<T>) -> Result<MlaLayer<T>> {
    let (h, d, r) = (split.heads, split.head_dim, split.rope_dim());
    let s = T::lit(((d + r) as f64 / d as f64).sqrt());
    let wq_rope = {
        let blocks: Vec<Matrix<T>> = (0..h)
            .map(|i| {
                let band = i * d..(i + 1) * d;
                split
                    .wuk_rope
                    .slice_rows(band.clone())
                    .t_matmul(&split.wq.slice_rows(band))
                    .scale(s)
            })
            .collect();
        let refs: Vec<&Matrix<T>> = blocks.iter().collect();
        if refs.is_empty() {
            Matrix::zeros(0, split.hidden)
        } else {
            Matrix::vstack(&refs)
        }
    };
    let head_offsets = split.wuv.matvec(&dec.value_offset);
    let bias = split.wo.matvec(&head_offsets);
    let out_bias = if bias.iter().any(|&b| b != T::zero()) {
        Some(bias)
    } else {
        None
    };
    MlaLayer::new(
        h,
        d,
        dec.wdkv.clone(),
        dec.wuk.clone(),
        dec.wuv.clone(),
        split.wdk_rope.clone(),
        QueryProjection::Full {
            wq_nope: split.wq.scale(s),
            wq_rope,
        },
        split.wo.clone(),
        split.rope.repeated(split.n_keep),
        out_bias,
    )
}

/// Factors the query path through `r_q` dims using the leading directions of
/// the uncentered query second moment. Returns the layer and captured energy.
pub fn compress_query<T: Scalar>(layer: &MlaLayer<T>, x: &Matrix<T>, r_q: usize) -> Result<(MlaLayer<T>, f64)> {
    check_width(x, layer.hidden)?;
    let stacked = layer.query.stacked();
    let width = stacked.rows();
    if r_q == 0 || r_q > width {
        return Err(Error::config(format!("r_q {r_q} outside 1..={width}")));
    }
    let q = x.matmul_t(&stacked);
    let moment = q.t_matmul(&q).scale(T::one() / T::lit(q.rows() as f64));
    let eig = sym_eig(&moment)?;
    let total: f64 = eig.eigenvalues.iter().map(|v| v.to_f64_lossy().max(0.0)).sum();
    let kept: f64 = eig.eigenvalues[..r_q].iter().map(|v| v.to_f64_lossy().max(0.0)).sum();
    let captured = if total > 0.0 { (kept / total).min(1.0) } else { 1.0 };
    let rq = eig.leading_vectors(r_q);
    let mut out = layer.clone();
    out.query = QueryProjection::LowRank {
        wdq: rq.t_matmul(&stacked),
        wuq: rq,
    };
    Ok((out, captured))
}

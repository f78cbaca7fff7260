//! Multi-head latent attention with a decoupled RoPE key.
//!
//! Keys and values are expanded per head from a shared latent
//! `c = W_dkv·x`; a single RoPE key `k^R = RoPE(W_kr·x)` is shared by every
//! head. The layer runs either in the MHA-like paradigm (explicit per-head
//! keys) or absorbed, attending directly over cached `[c; k^R]`.

use serde::{Deserialize, Serialize};

use super::cache::{DecodeLayer, KvCache, MlaDecoder};
use super::gqa::check_shape;
use super::kernel::causal_attention;
use super::rope::RopeSchedule;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Query path of an MLA layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum QueryProjection<T> {
    /// `wq_nope: h·d_nope × D`, `wq_rope: h·d^R × D`
    Full { wq_nope: Matrix<T>, wq_rope: Matrix<T> },
    /// `wdq: r_q × D`; `wuq: h·(d_nope + d^R) × r_q` with the content rows
    /// first and the RoPE rows after them.
    LowRank { wdq: Matrix<T>, wuq: Matrix<T> },
}

impl<T: Scalar> QueryProjection<T> {
    pub fn rank(&self) -> Option<usize> {
        match self {
            QueryProjection::Full { .. } => None,
            QueryProjection::LowRank { wdq, .. } => Some(wdq.rows()),
        }
    }

    /// Stacked `[W_q_nope; W_q_rope]`, materialising a low-rank product.
    pub fn stacked(&self) -> Matrix<T> {
        match self {
            QueryProjection::Full { wq_nope, wq_rope } => Matrix::vstack(&[wq_nope, wq_rope]),
            QueryProjection::LowRank { wdq, wuq } => wuq.matmul(wdq),
        }
    }

    /// Content and (not yet rotated) RoPE queries for a sequence.
    fn project(&self, x: &Matrix<T>, content_rows: usize) -> (Matrix<T>, Matrix<T>) {
        match self {
            QueryProjection::Full { wq_nope, wq_rope } => (x.matmul_t(wq_nope), x.matmul_t(wq_rope)),
            QueryProjection::LowRank { wdq, wuq } => {
                let all = x.matmul_t(wdq).matmul_t(wuq);
                let width = all.cols();
                (all.slice_cols(0..content_rows), all.slice_cols(content_rows..width))
            }
        }
    }

    pub(crate) fn project_token(&self, x: &[T], content_rows: usize) -> (Vec<T>, Vec<T>) {
        match self {
            QueryProjection::Full { wq_nope, wq_rope } => (wq_nope.matvec(x), wq_rope.matvec(x)),
            QueryProjection::LowRank { wdq, wuq } => {
                let mut all = wuq.matvec(&wdq.matvec(x));
                let rope = all.split_off(content_rows);
                (all, rope)
            }
        }
    }

    fn cast<U: Scalar>(&self) -> QueryProjection<U> {
        match self {
            QueryProjection::Full { wq_nope, wq_rope } => QueryProjection::Full {
                wq_nope: wq_nope.cast(),
                wq_rope: wq_rope.cast(),
            },
            QueryProjection::LowRank { wdq, wuq } => QueryProjection::LowRank {
                wdq: wdq.cast(),
                wuq: wuq.cast(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MlaLayer<T> {
    pub hidden: usize,
    pub heads: usize,
    /// Per-head content (NoPE) query/key dimension; also the value head width.
    pub d_nope: usize,
    /// Shared RoPE key dimension `d^R`.
    pub d_rope: usize,
    pub r_kv: usize,
    /// `r_kv × D`
    pub wdkv: Matrix<T>,
    /// `h·d_nope × r_kv`
    pub wuk: Matrix<T>,
    /// `h·d_nope × r_kv`
    pub wuv: Matrix<T>,
    /// `d^R × D`
    pub wkr: Matrix<T>,
    pub query: QueryProjection<T>,
    /// `D × h·d_nope`
    pub wo: Matrix<T>,
    /// Schedule over the `d^R`-wide RoPE head.
    pub rope: RopeSchedule<T>,
    /// Constant output offset carrying the value-side PCA mean correction.
    pub out_bias: Option<Vec<T>>,
}

impl<T: Scalar> MlaLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        heads: usize,
        d_nope: usize,
        wdkv: Matrix<T>,
        wuk: Matrix<T>,
        wuv: Matrix<T>,
        wkr: Matrix<T>,
        query: QueryProjection<T>,
        wo: Matrix<T>,
        rope: RopeSchedule<T>,
        out_bias: Option<Vec<T>>,
    ) -> Result<Self> {
        let hidden = wdkv.cols();
        let r_kv = wdkv.rows();
        let d_rope = wkr.rows();
        if heads == 0 {
            return Err(Error::config("MLA layer needs at least one head"));
        }
        check_shape("wuk", &wuk, heads * d_nope, r_kv)?;
        check_shape("wuv", &wuv, heads * d_nope, r_kv)?;
        check_shape("wkr", &wkr, d_rope, hidden)?;
        check_shape("wo", &wo, hidden, heads * d_nope)?;
        match &query {
            QueryProjection::Full { wq_nope, wq_rope } => {
                check_shape("wq_nope", wq_nope, heads * d_nope, hidden)?;
                check_shape("wq_rope", wq_rope, heads * d_rope, hidden)?;
            }
            QueryProjection::LowRank { wdq, wuq } => {
                if wdq.cols() != hidden {
                    return Err(Error::shape("wdq width != hidden"));
                }
                check_shape("wuq", wuq, heads * (d_nope + d_rope), wdq.rows())?;
            }
        }
        if rope.dim() != d_rope {
            return Err(Error::shape(format!("rope dim {} != d_rope {d_rope}", rope.dim())));
        }
        if let Some(b) = &out_bias {
            if b.len() != hidden {
                return Err(Error::shape("out_bias length != hidden"));
            }
        }
        Ok(Self {
            hidden,
            heads,
            d_nope,
            d_rope,
            r_kv,
            wdkv,
            wuk,
            wuv,
            wkr,
            query,
            wo,
            rope,
            out_bias,
        })
    }

    /// Per-token cache scalars in the absorbed paradigm, `r_kv + d^R`.
    pub fn kv_scalars_per_token(&self) -> usize {
        self.r_kv + self.d_rope
    }

    pub fn scale(&self) -> T {
        T::one() / T::lit((self.d_nope + self.d_rope) as f64).sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> MlaLayer<U> {
        MlaLayer {
            hidden: self.hidden,
            heads: self.heads,
            d_nope: self.d_nope,
            d_rope: self.d_rope,
            r_kv: self.r_kv,
            wdkv: self.wdkv.cast(),
            wuk: self.wuk.cast(),
            wuv: self.wuv.cast(),
            wkr: self.wkr.cast(),
            query: self.query.cast(),
            wo: self.wo.cast(),
            rope: self.rope.cast(),
            out_bias: self
                .out_bias
                .as_ref()
                .map(|b| b.iter().map(|v| U::lit(v.to_f64_lossy())).collect()),
        }
    }

    pub(crate) fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.hidden {
            return Err(Error::shape(format!(
                "input width {} != hidden {}",
                x.cols(),
                self.hidden
            )));
        }
        if x.rows() == 0 {
            return Err(Error::shape("empty sequence"));
        }
        Ok(())
    }

    pub(crate) fn add_bias(&self, y: &mut [T]) {
        if let Some(b) = &self.out_bias {
            for (v, &o) in y.iter_mut().zip(b) {
                *v = *v + o;
            }
        }
    }
}

/// MHA-paradigm forward: per-head keys `[W_uk,i·c; k^R]`, values `W_uv,i·c`.
pub fn mla_forward_mha_paradigm<T: Scalar>(layer: &MlaLayer<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    layer.check_input(x)?;
    let (h, dn, dr) = (layer.heads, layer.d_nope, layer.d_rope);
    let len = x.rows();
    let latent = x.matmul_t(&layer.wdkv);
    let k_content = latent.matmul_t(&layer.wuk);
    let values = latent.matmul_t(&layer.wuv);
    let mut k_rope = x.matmul_t(&layer.wkr);
    let (q_content, mut q_rope) = layer.query.project(x, h * dn);
    for t in 0..len {
        layer.rope.apply(k_rope.row_mut(t), t);
        layer.rope.apply_blocks(q_rope.row_mut(t), t);
    }
    let width = dn + dr;
    let mut q = Matrix::zeros(len, h * width);
    let mut k = Matrix::zeros(len, h * width);
    for t in 0..len {
        for i in 0..h {
            let qrow = &mut q.row_mut(t)[i * width..(i + 1) * width];
            qrow[..dn].copy_from_slice(&q_content.row(t)[i * dn..(i + 1) * dn]);
            qrow[dn..].copy_from_slice(&q_rope.row(t)[i * dr..(i + 1) * dr]);
            let krow = &mut k.row_mut(t)[i * width..(i + 1) * width];
            krow[..dn].copy_from_slice(&k_content.row(t)[i * dn..(i + 1) * dn]);
            krow[dn..].copy_from_slice(k_rope.row(t));
        }
    }
    let o = causal_attention(&q, &k, &values, h, h, layer.scale());
    let mut y = o.matmul_t(&layer.wo);
    for t in 0..len {
        layer.add_bias(y.row_mut(t));
    }
    Ok(y)
}

/// Absorbed forward, run token by token over a latent cache.
///
/// Returns the outputs and the number of scalars cached for each token.
pub fn mla_forward_absorbed<T: Scalar>(layer: &MlaLayer<T>, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<usize>)> {
    layer.check_input(x)?;
    let decoder = MlaDecoder::new(layer);
    let mut cache = KvCache::new(decoder.cache_width(), x.rows());
    let mut y = Matrix::zeros(x.rows(), layer.hidden);
    let mut trace = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let before = cache.scalars();
        let out = decoder.decode_token(&mut cache, x.row(t));
        trace.push(cache.scalars() - before);
        y.row_mut(t).copy_from_slice(&out);
    }
    Ok((y, trace))
}

//! Output-preserving rewrites of a GQA layer.
//!
//! The factorized and MQA forms are RoPE-free; they exist to show what the
//! wider latent can express. The RoPE-bearing path is [`merge_key_heads`].

use serde::{Deserialize, Serialize};

use crate::attention::gqa::check_shape;
use crate::attention::kernel::{causal_attention, causal_scores};
use crate::attention::{GqaLayer, RopeSchedule};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// GQA with keys and values produced from one `2gd`-wide latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MlaFactorizedLayer<T> {
    pub hidden: usize,
    pub heads: usize,
    pub groups: usize,
    pub head_dim: usize,
    /// `2gd × D`: key rows over value rows.
    pub wdkv: Matrix<T>,
    /// `hd × 2gd`
    pub wuk: Matrix<T>,
    /// `hd × 2gd`
    pub wuv: Matrix<T>,
    pub wq: Matrix<T>,
    pub wo: Matrix<T>,
}

impl<T: Scalar> MlaFactorizedLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        heads: usize,
        groups: usize,
        head_dim: usize,
        wdkv: Matrix<T>,
        wuk: Matrix<T>,
        wuv: Matrix<T>,
        wq: Matrix<T>,
        wo: Matrix<T>,
    ) -> Result<Self> {
        let hidden = wq.cols();
        let (hd, latent) = (heads * head_dim, 2 * groups * head_dim);
        check_shape("wdkv", &wdkv, latent, hidden)?;
        check_shape("wuk", &wuk, hd, latent)?;
        check_shape("wuv", &wuv, hd, latent)?;
        check_shape("wq", &wq, hd, hidden)?;
        check_shape("wo", &wo, hidden, hd)?;
        Ok(Self {
            hidden,
            heads,
            groups,
            head_dim,
            wdkv,
            wuk,
            wuv,
            wq,
            wo,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.wdkv.rows()
    }

    pub fn scale(&self) -> T {
        T::one() / T::lit(self.head_dim as f64).sqrt()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_width(x, self.hidden)?;
        let c = x.matmul_t(&self.wdkv);
        let q = x.matmul_t(&self.wq);
        let k = c.matmul_t(&self.wuk);
        let v = c.matmul_t(&self.wuv);
        let o = causal_attention(&q, &k, &v, self.heads, self.heads, self.scale());
        Ok(o.matmul_t(&self.wo))
    }
}

/// Selector placement: head `i` reads latent rows `offset + grp(i)·d ..`.
fn selector<T: Scalar>(heads: usize, groups: usize, d: usize, width: usize, offset: usize) -> Matrix<T> {
    let per = heads / groups;
    let mut m = Matrix::zeros(heads * d, width);
    for i in 0..heads {
        for a in 0..d {
            m.set(i * d + a, offset + (i / per) * d + a, T::one());
        }
    }
    m
}

/// Stacks `[W_k; W_v]` into one latent and reads it back through 0/1 selectors.
pub fn gqa_to_mla_factorized<T: Scalar>(src: &GqaLayer<T>) -> MlaFactorizedLayer<T> {
    let (h, g, d) = (src.heads, src.groups, src.head_dim);
    let latent = 2 * g * d;
    MlaFactorizedLayer {
        hidden: src.hidden,
        heads: h,
        groups: g,
        head_dim: d,
        wdkv: Matrix::vstack(&[&src.wk, &src.wv]),
        wuk: selector(h, g, d, latent, 0),
        wuv: selector(h, g, d, latent, g * d),
        wq: src.wq.clone(),
        wo: src.wo.clone(),
    }
}

/// Single shared KV head of width `2gd` with per-head absorbed queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MqaLayer<T> {
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// `h·2gd × D`, block `i` is `W_uk,iᵀ W_q,i`.
    pub wq: Matrix<T>,
    /// `2gd × D`, shared key and value.
    pub wkv: Matrix<T>,
    /// `D × h·2gd`, block `i` is `W_o,i W_uv,i`.
    pub wo: Matrix<T>,
}

impl<T: Scalar> MqaLayer<T> {
    pub fn latent_dim(&self) -> usize {
        self.wkv.rows()
    }

    pub fn scale(&self) -> T {
        T::one() / T::lit(self.head_dim as f64).sqrt()
    }

    /// `W'_q,i` as a `2gd × D` block.
    pub fn query_block(&self, head: usize) -> Matrix<T> {
        let w = self.latent_dim();
        self.wq.slice_rows(head * w..(head + 1) * w)
    }

    /// `W'_q,iᵀ W_kv`, the bilinear form scoring token pairs for head `i`.
    pub fn interaction(&self, head: usize) -> Matrix<T> {
        self.query_block(head).t_matmul(&self.wkv)
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_width(x, self.hidden)?;
        let q = x.matmul_t(&self.wq);
        let c = x.matmul_t(&self.wkv);
        let o = causal_attention(&q, &c, &c, self.heads, 1, self.scale());
        Ok(o.matmul_t(&self.wo))
    }
}

/// Absorbs the up-projections into queries and the output projection.
pub fn mla_factorized_to_mqa<T: Scalar>(src: &MlaFactorizedLayer<T>) -> MqaLayer<T> {
    let (h, d) = (src.heads, src.head_dim);
    let parts: Vec<Matrix<T>> = (0..h)
        .map(|i| {
            let band = i * d..(i + 1) * d;
            src.wuk.slice_rows(band.clone()).t_matmul(&src.wq.slice_rows(band))
        })
        .collect();
    let refs: Vec<&Matrix<T>> = parts.iter().collect();
    let outs: Vec<Matrix<T>> = (0..h)
        .map(|i| {
            let band = i * d..(i + 1) * d;
            src.wo.slice_cols(band.clone()).matmul(&src.wuv.slice_rows(band))
        })
        .collect();
    let out_refs: Vec<&Matrix<T>> = outs.iter().collect();
    MqaLayer {
        hidden: src.hidden,
        heads: h,
        head_dim: d,
        wq: Matrix::vstack(&refs),
        wkv: src.wdkv.clone(),
        wo: Matrix::hstack(&out_refs),
    }
}

/// Relative residual of the best GQA fit to a factorized layer's keys.
///
/// Every head in a GQA group must use one key map, so the least-squares fit
/// of `W_uk,i W_dkv` within a group is the group mean. Returns
/// `‖residual‖_F / ‖keys‖_F`.
pub fn gqa_key_fit_residual<T: Scalar>(layer: &MlaFactorizedLayer<T>, groups: usize) -> Result<f64> {
    let (h, d) = (layer.heads, layer.head_dim);
    if groups == 0 || h % groups != 0 {
        return Err(Error::config(format!("{groups} groups do not divide {h} heads")));
    }
    let per = h / groups;
    let keys: Vec<Matrix<f64>> = (0..h)
        .map(|i| {
            layer
                .wuk
                .slice_rows(i * d..(i + 1) * d)
                .matmul(&layer.wdkv)
                .cast::<f64>()
        })
        .collect();
    let (mut resid, mut total) = (0.0, 0.0);
    for grp in keys.chunks(per) {
        let mut mean = Matrix::<f64>::zeros(d, layer.hidden);
        for k in grp {
            mean = mean.add(k);
        }
        let mean = mean.scale(1.0 / per as f64);
        for k in grp {
            resid += k.sub(&mean).frobenius().powi(2);
            total += k.frobenius().powi(2);
        }
    }
    if total == 0.0 {
        return Err(Error::Degenerate("all keys are zero".into()));
    }
    Ok((resid / total).sqrt())
}

/// A GQA layer whose `g` key heads are read as one `gd`-wide head.
///
/// Each query head is lifted into the merged key space by `W_uk,iᵀ`, RoPE is
/// applied blockwise every `d` dims, and values go through `W_uv,i`. Before
/// any rotation `W_uk` and `W_uv` are the group selectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MergedGqaLayer<T> {
    pub hidden: usize,
    pub heads: usize,
    pub groups: usize,
    pub head_dim: usize,
    pub wq: Matrix<T>,
    /// `gd × D`
    pub wk: Matrix<T>,
    /// `gd × D`
    pub wv: Matrix<T>,
    /// `hd × gd`
    pub wuk: Matrix<T>,
    /// `hd × gd`
    pub wuv: Matrix<T>,
    pub wo: Matrix<T>,
    /// `d`-wide schedule applied to every head-sized block of the merged key.
    pub rope: RopeSchedule<T>,
}

/// Merges all key/value groups into one latent head; exact.
pub fn merge_key_heads<T: Scalar>(src: &GqaLayer<T>) -> MergedGqaLayer<T> {
    let (h, g, d) = (src.heads, src.groups, src.head_dim);
    MergedGqaLayer {
        hidden: src.hidden,
        heads: h,
        groups: g,
        head_dim: d,
        wq: src.wq.clone(),
        wk: src.wk.clone(),
        wv: src.wv.clone(),
        wuk: selector(h, g, d, g * d, 0),
        wuv: selector(h, g, d, g * d, 0),
        wo: src.wo.clone(),
        rope: src.rope.clone(),
    }
}

impl<T: Scalar> MergedGqaLayer<T> {
    pub fn key_dim(&self) -> usize {
        self.groups * self.head_dim
    }

    pub fn kv_scalars_per_token(&self) -> usize {
        2 * self.key_dim()
    }

    pub fn scale(&self) -> T {
        T::one() / T::lit(self.head_dim as f64).sqrt()
    }

    /// `h·gd × D`, block `i` is `W_uk,iᵀ W_q,i`.
    pub fn absorbed_query(&self) -> Matrix<T> {
        let d = self.head_dim;
        let blocks: Vec<Matrix<T>> = (0..self.heads)
            .map(|i| {
                let band = i * d..(i + 1) * d;
                self.wuk.slice_rows(band.clone()).t_matmul(&self.wq.slice_rows(band))
            })
            .collect();
        let refs: Vec<&Matrix<T>> = blocks.iter().collect();
        Matrix::vstack(&refs)
    }

    /// Pre-RoPE merged keys, `T × gd`.
    pub fn keys(&self, x: &Matrix<T>) -> Matrix<T> {
        x.matmul_t(&self.wk)
    }

    fn rotated_qk(&self, x: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let mut q = x.matmul_t(&self.absorbed_query());
        let mut k = self.keys(x);
        for t in 0..x.rows() {
            self.rope.apply_blocks(q.row_mut(t), t);
            self.rope.apply_blocks(k.row_mut(t), t);
        }
        (q, k)
    }

    pub fn logits(&self, x: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        check_width(x, self.hidden)?;
        let (q, k) = self.rotated_qk(x);
        Ok(causal_scores(&q, &k, self.heads, 1, self.scale()))
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_width(x, self.hidden)?;
        let (q, k) = self.rotated_qk(x);
        let v = x.matmul_t(&self.wv);
        let o = causal_attention(&q, &k, &v, self.heads, 1, self.scale());
        Ok(expand_values(&o, &self.wuv, self.heads, self.head_dim).matmul_t(&self.wo))
    }

    pub fn cast<U: Scalar>(&self) -> MergedGqaLayer<U> {
        MergedGqaLayer {
            hidden: self.hidden,
            heads: self.heads,
            groups: self.groups,
            head_dim: self.head_dim,
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wuk: self.wuk.cast(),
            wuv: self.wuv.cast(),
            wo: self.wo.cast(),
            rope: self.rope.cast(),
        }
    }

    /// Checks shapes after deserialisation or manual construction.
    pub fn validate(&self) -> Result<()> {
        let (h, d, gd) = (self.heads, self.head_dim, self.key_dim());
        check_shape("wq", &self.wq, h * d, self.hidden)?;
        check_shape("wk", &self.wk, gd, self.hidden)?;
        check_shape("wv", &self.wv, gd, self.hidden)?;
        check_shape("wuk", &self.wuk, h * d, gd)?;
        check_shape("wuv", &self.wuv, h * d, gd)?;
        check_shape("wo", &self.wo, self.hidden, h * d)?;
        if self.rope.dim() != d {
            return Err(Error::shape("rope dim != head dim"));
        }
        Ok(())
    }
}

/// Maps per-head attention over a shared `w`-wide value to `T × h·d` via
/// each head's `W_uv,i` band.
pub(crate) fn expand_values<T: Scalar>(o: &Matrix<T>, wuv: &Matrix<T>, heads: usize, d: usize) -> Matrix<T> {
    let w = wuv.cols();
    let mut out = Matrix::zeros(o.rows(), heads * d);
    for t in 0..o.rows() {
        for i in 0..heads {
            let oi = &o.row(t)[i * w..(i + 1) * w];
            for a in 0..d {
                let v = crate::tensor::dot(wuv.row(i * d + a), oi);
                out.set(t, i * d + a, v);
            }
        }
    }
    out
}

pub(crate) fn check_width<T: Scalar>(x: &Matrix<T>, hidden: usize) -> Result<()> {
    if x.cols() != hidden {
        return Err(Error::shape(format!("input width {} != hidden {hidden}", x.cols())));
    }
    if x.rows() == 0 {
        return Err(Error::shape("empty sequence"));
    }
    Ok(())
}

use serde::{Deserialize, Serialize};

use super::kernel::{causal_attention, causal_scores};
use super::rope::RopeSchedule;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Grouped-query attention layer without biases.
///
/// `heads` query heads share `groups` key/value heads; query head `i` reads
/// group `i / (heads / groups)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GqaLayer<T> {
    pub hidden: usize,
    pub heads: usize,
    pub groups: usize,
    pub head_dim: usize,
    /// `heads·head_dim × hidden`
    pub wq: Matrix<T>,
    /// `groups·head_dim × hidden`
    pub wk: Matrix<T>,
    /// `groups·head_dim × hidden`
    pub wv: Matrix<T>,
    /// `hidden × heads·head_dim`
    pub wo: Matrix<T>,
    pub rope: RopeSchedule<T>,
}

impl<T: Scalar> GqaLayer<T> {
    pub fn new(
        heads: usize,
        groups: usize,
        wq: Matrix<T>,
        wk: Matrix<T>,
        wv: Matrix<T>,
        wo: Matrix<T>,
        rope: RopeSchedule<T>,
    ) -> Result<Self> {
        let hidden = wq.cols();
        if heads == 0 || groups == 0 || heads % groups != 0 {
            return Err(Error::config(format!("groups ({groups}) must divide heads ({heads})")));
        }
        if hidden % heads != 0 {
            return Err(Error::config(format!("hidden {hidden} not divisible by {heads} heads")));
        }
        let head_dim = hidden / heads;
        check_shape("wq", &wq, heads * head_dim, hidden)?;
        check_shape("wk", &wk, groups * head_dim, hidden)?;
        check_shape("wv", &wv, groups * head_dim, hidden)?;
        check_shape("wo", &wo, hidden, heads * head_dim)?;
        if rope.dim() != head_dim {
            return Err(Error::shape(format!("rope dim {} != head dim {head_dim}", rope.dim())));
        }
        Ok(Self {
            hidden,
            heads,
            groups,
            head_dim,
            wq,
            wk,
            wv,
            wo,
            rope,
        })
    }

    #[inline]
    pub fn group_of(&self, head: usize) -> usize {
        head / (self.heads / self.groups)
    }

    /// Per-token KV cache scalars, `2·g·d`.
    pub fn kv_scalars_per_token(&self) -> usize {
        2 * self.groups * self.head_dim
    }

    pub fn scale(&self) -> T {
        T::one() / T::lit(self.head_dim as f64).sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> GqaLayer<U> {
        GqaLayer {
            hidden: self.hidden,
            heads: self.heads,
            groups: self.groups,
            head_dim: self.head_dim,
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            rope: self.rope.cast(),
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

    /// Position-encoded queries and keys.
    fn rotated_qk(&self, x: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let mut q = x.matmul_t(&self.wq);
        let mut k = x.matmul_t(&self.wk);
        for t in 0..x.rows() {
            self.rope.apply_blocks(q.row_mut(t), t);
            self.rope.apply_blocks(k.row_mut(t), t);
        }
        (q, k)
    }

    /// Scaled pre-softmax scores, one `T × T` matrix per query head.
    pub fn logits(&self, x: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        self.check_input(x)?;
        let (q, k) = self.rotated_qk(x);
        Ok(causal_scores(&q, &k, self.heads, self.groups, self.scale()))
    }

    /// Same layer with positional encoding switched off.
    pub fn forward_nope(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let q = x.matmul_t(&self.wq);
        let k = x.matmul_t(&self.wk);
        let v = x.matmul_t(&self.wv);
        let o = causal_attention(&q, &k, &v, self.heads, self.groups, self.scale());
        Ok(o.matmul_t(&self.wo))
    }
}

/// Causal GQA forward pass over a `T × D` sequence, positions `0..T`.
pub fn gqa_forward<T: Scalar>(layer: &GqaLayer<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    layer.check_input(x)?;
    let (q, k) = layer.rotated_qk(x);
    let v = x.matmul_t(&layer.wv);
    let o = causal_attention(&q, &k, &v, layer.heads, layer.groups, layer.scale());
    Ok(o.matmul_t(&layer.wo))
}

pub(crate) fn check_shape<T: Scalar>(name: &str, m: &Matrix<T>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::shape(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

//! KV-cache accounting and single-stream incremental decoders.

use serde::{Deserialize, Serialize};

use super::gqa::GqaLayer;
use super::kernel::softmax_in_place;
use super::mla::MlaLayer;
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSpec {
    pub per_token_scalars: usize,
    pub dtype_bytes: usize,
    pub label: String,
}

impl CacheSpec {
    pub fn new(per_token_scalars: usize, dtype_bytes: usize, label: impl Into<String>) -> Self {
        assert!(per_token_scalars > 0, "cache must store something per token");
        Self {
            per_token_scalars,
            dtype_bytes,
            label: label.into(),
        }
    }

    /// `2·g·d` scalars: one key and one value per group.
    pub fn gqa(groups: usize, head_dim: usize, dtype_bytes: usize) -> Self {
        Self::new(2 * groups * head_dim, dtype_bytes, "gqa")
    }

    /// `r_kv + d^R` scalars: the latent plus the shared RoPE key.
    pub fn mla(r_kv: usize, d_rope: usize, dtype_bytes: usize) -> Self {
        Self::new(r_kv + d_rope, dtype_bytes, "mla")
    }

    /// Fractional size reduction relative to `baseline`, `1 − self/baseline`.
    pub fn reduction_vs(&self, baseline: &CacheSpec) -> f64 {
        1.0 - self.per_token_scalars as f64 / baseline.per_token_scalars as f64
    }
}

pub fn kv_cache_bytes(spec: &CacheSpec, seq_len: usize) -> u64 {
    spec.per_token_scalars as u64 * spec.dtype_bytes as u64 * seq_len as u64
}

/// Formats a reduction as a signed percentage label, e.g. `-92.97%`.
pub fn reduction_label(fraction: f64) -> String {
    format!("-{:.2}%", fraction * 100.0)
}

/// Flat per-token cache; token `j` occupies `data[j·width..(j+1)·width]`.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(width: usize, capacity: usize) -> Self {
        Self {
            width,
            data: Vec::with_capacity(width * capacity),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.data.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scalars(&self) -> usize {
        self.data.len()
    }

    /// Copy of the first `keep` tokens with room for `extra` more, memory
    /// already touched so later pushes neither reallocate nor page-fault.
    pub fn fork(&self, keep: usize, extra: usize) -> Self {
        let len = (keep * self.width).min(self.data.len());
        let mut data = Vec::with_capacity(len + extra * self.width);
        data.extend_from_slice(&self.data[..len]);
        data.resize(len + extra * self.width, T::zero());
        data.truncate(len);
        Self {
            width: self.width,
            data,
        }
    }

    #[inline]
    pub fn token(&self, j: usize) -> &[T] {
        &self.data[j * self.width..(j + 1) * self.width]
    }

    fn push(&mut self, entry: &[T]) {
        debug_assert_eq!(entry.len(), self.width);
        self.data.extend_from_slice(entry);
    }
}

/// A layer that can decode one token at a time against its own cache.
pub trait DecodeLayer<T: Scalar> {
    fn hidden(&self) -> usize;

    fn cache_width(&self) -> usize;

    /// Appends the cache entry for `x` at the next position without attending.
    fn prefill_token(&self, cache: &mut KvCache<T>, x: &[T]);

    /// Appends the cache entry for `x` and returns the layer output.
    fn decode_token(&self, cache: &mut KvCache<T>, x: &[T]) -> Vec<T>;
}

pub struct GqaDecoder<'a, T> {
    layer: &'a GqaLayer<T>,
}

impl<'a, T: Scalar> GqaDecoder<'a, T> {
    pub fn new(layer: &'a GqaLayer<T>) -> Self {
        Self { layer }
    }

    fn entry(&self, x: &[T], pos: usize) -> Vec<T> {
        let l = self.layer;
        let mut k = l.wk.matvec(x);
        l.rope.apply_blocks(&mut k, pos);
        k.extend(l.wv.matvec(x));
        k
    }
}

impl<T: Scalar> DecodeLayer<T> for GqaDecoder<'_, T> {
    fn hidden(&self) -> usize {
        self.layer.hidden
    }

    fn cache_width(&self) -> usize {
        self.layer.kv_scalars_per_token()
    }

    fn prefill_token(&self, cache: &mut KvCache<T>, x: &[T]) {
        let entry = self.entry(x, cache.len());
        cache.push(&entry);
    }

    fn decode_token(&self, cache: &mut KvCache<T>, x: &[T]) -> Vec<T> {
        let l = self.layer;
        let pos = cache.len();
        let entry = self.entry(x, pos);
        cache.push(&entry);
        let (h, d) = (l.heads, l.head_dim);
        let gd = l.groups * d;
        let mut q = l.wq.matvec(x);
        l.rope.apply_blocks(&mut q, pos);
        let len = cache.len();
        let scale = l.scale();
        let mut scores = vec![T::zero(); h * len];
        for j in 0..len {
            let tok = cache.token(j);
            for i in 0..h {
                let g = l.group_of(i);
                scores[i * len + j] = dot(&q[i * d..(i + 1) * d], &tok[g * d..(g + 1) * d]) * scale;
            }
        }
        for row in scores.chunks_exact_mut(len) {
            softmax_in_place(row);
        }
        let mut o = vec![T::zero(); h * d];
        for j in 0..len {
            let tok = cache.token(j);
            for i in 0..h {
                let g = l.group_of(i);
                axpy(
                    &mut o[i * d..(i + 1) * d],
                    scores[i * len + j],
                    &tok[gd + g * d..gd + (g + 1) * d],
                );
            }
        }
        l.wo.matvec(&o)
    }
}

pub struct MlaDecoder<'a, T> {
    layer: &'a MlaLayer<T>,
}

impl<'a, T: Scalar> MlaDecoder<'a, T> {
    pub fn new(layer: &'a MlaLayer<T>) -> Self {
        Self { layer }
    }

    fn entry(&self, x: &[T], pos: usize) -> Vec<T> {
        let l = self.layer;
        let mut e = l.wdkv.matvec(x);
        let mut kr = l.wkr.matvec(x);
        l.rope.apply(&mut kr, pos);
        e.extend(kr);
        e
    }
}

impl<T: Scalar> DecodeLayer<T> for MlaDecoder<'_, T> {
    fn hidden(&self) -> usize {
        self.layer.hidden
    }

    fn cache_width(&self) -> usize {
        self.layer.kv_scalars_per_token()
    }

    fn prefill_token(&self, cache: &mut KvCache<T>, x: &[T]) {
        let entry = self.entry(x, cache.len());
        cache.push(&entry);
    }

    fn decode_token(&self, cache: &mut KvCache<T>, x: &[T]) -> Vec<T> {
        let l = self.layer;
        let pos = cache.len();
        let entry = self.entry(x, pos);
        cache.push(&entry);
        let (h, dn, dr, r) = (l.heads, l.d_nope, l.d_rope, l.r_kv);
        let width = r + dr;
        let (qc, mut qr) = l.query.project_token(x, h * dn);
        l.rope.apply_blocks(&mut qr, pos);

        // absorbed queries [W_uk,iᵀ q^C_i; q^R_i]
        let mut qhat = vec![T::zero(); h * width];
        for i in 0..h {
            let dst = &mut qhat[i * width..(i + 1) * width];
            for a in 0..dn {
                axpy(&mut dst[..r], qc[i * dn + a], l.wuk.row(i * dn + a));
            }
            dst[r..].copy_from_slice(&qr[i * dr..(i + 1) * dr]);
        }

        let len = cache.len();
        let scale = l.scale();
        let mut scores = vec![T::zero(); h * len];
        for j in 0..len {
            let tok = cache.token(j);
            for i in 0..h {
                scores[i * len + j] = dot(&qhat[i * width..(i + 1) * width], tok) * scale;
            }
        }
        for row in scores.chunks_exact_mut(len) {
            softmax_in_place(row);
        }
        let mut ohat = vec![T::zero(); h * r];
        for j in 0..len {
            let latent = &cache.token(j)[..r];
            for i in 0..h {
                axpy(&mut ohat[i * r..(i + 1) * r], scores[i * len + j], latent);
            }
        }
        let mut o = vec![T::zero(); h * dn];
        for i in 0..h {
            for a in 0..dn {
                o[i * dn + a] = dot(l.wuv.row(i * dn + a), &ohat[i * r..(i + 1) * r]);
            }
        }
        let mut y = l.wo.matvec(&o);
        l.add_bias(&mut y);
        y
    }
}

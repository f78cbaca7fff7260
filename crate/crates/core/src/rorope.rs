//! Per-frequency key rotations, frequency folding and the RoPE/NoPE split.
//!
//! Frequency group `G` with size `M` covers pairs `l0 = G·M .. l0 + M`. Its
//! `M·g` real coordinates are ordered head-major, `a = j·M + m`, and live at
//! merged key dims `j·d + 2(l0 + m)`; the imaginary ones are one further.
//! Sorting each group's rotation by descending energy therefore moves the
//! dominant components into the leading heads of the merged key.

use serde::{Deserialize, Serialize};

use crate::attention::gqa::check_shape;
use crate::attention::kernel::{causal_attention, causal_scores};
use crate::attention::RopeSchedule;
use crate::error::{Error, Result};
use crate::linalg::{orthonormal_defect, sym_eig};
use crate::rewrite::{check_width, expand_values, MergedGqaLayer};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Largest tolerated orthonormality defect for a rotation.
pub const ROTATION_TOL: f64 = 1e-8;

/// Merged-key indices of group `group`, real then imaginary.
pub fn group_indices(group: usize, m: usize, heads: usize, d: usize) -> (Vec<usize>, Vec<usize>) {
    let l0 = group * m;
    let real: Vec<usize> = (0..heads)
        .flat_map(|j| (0..m).map(move |k| j * d + 2 * (l0 + k)))
        .collect();
    let imag = real.iter().map(|i| i + 1).collect();
    (real, imag)
}

fn check_group_size(m: usize, d: usize) -> Result<()> {
    if m == 0 || d % 2 != 0 || (d / 2) % m != 0 {
        return Err(Error::config(format!(
            "group size {m} does not divide {} frequency pairs",
            d / 2
        )));
    }
    Ok(())
}

/// Uncentered second moments of the pre-RoPE merged keys per frequency group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FreqStats<T> {
    pub group_size: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// One `Mg × Mg` matrix per group, `Σ_t k_x k_xᵀ`.
    pub sigma_x: Vec<Matrix<T>>,
    pub sigma_y: Vec<Matrix<T>>,
    pub sample_count: usize,
    /// Per merged-key dimension, `Σ_t k²`.
    pub sum_sq: Vec<T>,
}

impl<T: Scalar> FreqStats<T> {
    pub fn empty(group_size: usize, heads: usize, head_dim: usize) -> Result<Self> {
        check_group_size(group_size, head_dim)?;
        let n = head_dim / 2 / group_size;
        let w = group_size * heads;
        Ok(Self {
            group_size,
            heads,
            head_dim,
            sigma_x: vec![Matrix::zeros(w, w); n],
            sigma_y: vec![Matrix::zeros(w, w); n],
            sample_count: 0,
            sum_sq: vec![T::zero(); heads * head_dim],
        })
    }

    pub fn num_groups(&self) -> usize {
        self.sigma_x.len()
    }

    /// Adds a batch of pre-RoPE merged keys (`n × gd`).
    pub fn accumulate(&mut self, keys: &Matrix<T>) -> Result<()> {
        let gd = self.heads * self.head_dim;
        if keys.cols() != gd {
            return Err(Error::shape(format!(
                "keys have {} columns, expected {gd}",
                keys.cols()
            )));
        }
        for grp in 0..self.num_groups() {
            let (re, im) = group_indices(grp, self.group_size, self.heads, self.head_dim);
            for (idx, sigma) in [(&re, &mut self.sigma_x[grp]), (&im, &mut self.sigma_y[grp])] {
                let w = idx.len();
                for t in 0..keys.rows() {
                    let k = keys.row(t);
                    for a in 0..w {
                        let ka = k[idx[a]];
                        let row = sigma.row_mut(a);
                        for b in 0..w {
                            row[b] = row[b] + ka * k[idx[b]];
                        }
                    }
                }
            }
        }
        for t in 0..keys.rows() {
            for (s, &k) in self.sum_sq.iter_mut().zip(keys.row(t)) {
                *s = *s + k * k;
            }
        }
        self.sample_count += keys.rows();
        Ok(())
    }

    /// Root-mean-square key value per merged dimension.
    pub fn rms(&self) -> Vec<f64> {
        let n = self.sample_count.max(1) as f64;
        self.sum_sq.iter().map(|s| (s.to_f64_lossy() / n).sqrt()).collect()
    }

    /// Per-dimension RMS after rotating every group by `rot`.
    pub fn rotated_rms(&self, rot: &RotationSet<T>) -> Result<Vec<f64>> {
        rot.check_against(self)?;
        let n = self.sample_count.max(1) as f64;
        let mut out = vec![0.0; self.heads * self.head_dim];
        for grp in 0..self.num_groups() {
            let u = &rot.rotations[grp];
            let (re, im) = group_indices(grp, self.group_size, self.heads, self.head_dim);
            for (idx, sigma) in [(&re, &self.sigma_x[grp]), (&im, &self.sigma_y[grp])] {
                let su = sigma.matmul(u);
                for (a, &dim) in idx.iter().enumerate() {
                    let e: f64 = (0..idx.len())
                        .map(|b| (u.get(b, a) * su.get(b, a)).to_f64_lossy())
                        .sum();
                    out[dim] = (e.max(0.0) / n).sqrt();
                }
            }
        }
        Ok(out)
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if (self.group_size, self.heads, self.head_dim) != (other.group_size, other.heads, other.head_dim) {
            return Err(Error::shape("cannot merge stats of different layouts"));
        }
        let add = |a: &[Matrix<T>], b: &[Matrix<T>]| a.iter().zip(b).map(|(x, y)| x.add(y)).collect();
        Ok(Self {
            group_size: self.group_size,
            heads: self.heads,
            head_dim: self.head_dim,
            sigma_x: add(&self.sigma_x, &other.sigma_x),
            sigma_y: add(&self.sigma_y, &other.sigma_y),
            sample_count: self.sample_count + other.sample_count,
            sum_sq: self.sum_sq.iter().zip(&other.sum_sq).map(|(&a, &b)| a + b).collect(),
        })
    }
}

pub fn merge_stats<T: Scalar>(a: &FreqStats<T>, b: &FreqStats<T>) -> Result<FreqStats<T>> {
    a.merge(b)
}

pub fn collect_key_stats<T: Scalar>(
    layer: &MergedGqaLayer<T>,
    x: &Matrix<T>,
    group_size: usize,
) -> Result<FreqStats<T>> {
    if x.rows() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    check_width(x, layer.hidden)?;
    let mut stats = FreqStats::empty(group_size, layer.groups, layer.head_dim)?;
    stats.accumulate(&layer.keys(x))?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RotationSet<T> {
    pub group_size: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// One `Mg × Mg` orthogonal matrix per group; `k' = Uᵀ k`.
    pub rotations: Vec<Matrix<T>>,
}

impl<T: Scalar> RotationSet<T> {
    pub fn identity(group_size: usize, heads: usize, head_dim: usize) -> Result<Self> {
        check_group_size(group_size, head_dim)?;
        let n = head_dim / 2 / group_size;
        Ok(Self {
            group_size,
            heads,
            head_dim,
            rotations: vec![Matrix::identity(group_size * heads); n],
        })
    }

    pub fn inverse(&self) -> Self {
        Self {
            rotations: self.rotations.iter().map(Matrix::transpose).collect(),
            ..self.clone()
        }
    }

    pub fn max_defect(&self) -> f64 {
        self.rotations
            .iter()
            .map(|u| orthonormal_defect(u).to_f64_lossy())
            .fold(0.0, f64::max)
    }

    fn check_shape(&self, heads: usize, head_dim: usize) -> Result<()> {
        check_group_size(self.group_size, head_dim)?;
        let w = self.group_size * heads;
        if self.heads != heads || self.head_dim != head_dim {
            return Err(Error::shape("rotation set built for a different layer"));
        }
        if self.rotations.len() != head_dim / 2 / self.group_size {
            return Err(Error::shape("wrong number of frequency groups"));
        }
        for u in &self.rotations {
            check_shape("rotation", u, w, w)?;
        }
        Ok(())
    }

    fn check_against(&self, stats: &FreqStats<T>) -> Result<()> {
        if self.group_size != stats.group_size {
            return Err(Error::shape("rotation and stats group sizes differ"));
        }
        self.check_shape(stats.heads, stats.head_dim)
    }
}

/// Eigenvectors of `σx + σy` per group, sorted by descending eigenvalue.
pub fn solve_rotations<T: Scalar>(stats: &FreqStats<T>) -> Result<RotationSet<T>> {
    if stats.sample_count == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let rotations = stats
        .sigma_x
        .iter()
        .zip(&stats.sigma_y)
        .map(|(sx, sy)| sym_eig(&sx.add(sy)).map(|e| e.eigenvectors))
        .collect::<Result<_>>()?;
    Ok(RotationSet {
        group_size: stats.group_size,
        heads: stats.heads,
        head_dim: stats.head_dim,
        rotations,
    })
}

/// Replaces each run of `group_size` frequencies by its first frequency.
pub fn fold_frequencies<T: Scalar>(layer: &MergedGqaLayer<T>, group_size: usize) -> Result<MergedGqaLayer<T>> {
    let mut out = layer.clone();
    out.rope = layer.rope.folded(group_size)?;
    Ok(out)
}

/// Rotates key rows of `W_k` and the matching columns of `W_uk`.
///
/// Exact only when every rotated group shares one frequency, so the schedule
/// must already be folded for the set's group size.
pub fn apply_rotations<T: Scalar>(layer: &MergedGqaLayer<T>, rot: &RotationSet<T>) -> Result<MergedGqaLayer<T>> {
    rot.check_shape(layer.groups, layer.head_dim)?;
    let defect = rot.max_defect();
    if !(defect <= ROTATION_TOL) {
        return Err(Error::NotOrthonormal(defect));
    }
    if !layer.rope.is_folded(rot.group_size) {
        return Err(Error::Invariant(format!(
            "rope schedule is not folded for group size {}",
            rot.group_size
        )));
    }
    let mut out = layer.clone();
    for (grp, u) in rot.rotations.iter().enumerate() {
        let (re, im) = group_indices(grp, rot.group_size, layer.groups, layer.head_dim);
        for idx in [&re, &im] {
            let w = idx.len();
            for a in 0..w {
                let row = out.wk.row_mut(idx[a]);
                row.iter_mut().for_each(|v| *v = T::zero());
                for b in 0..w {
                    crate::tensor::axpy(row, u.get(b, a), layer.wk.row(idx[b]));
                }
            }
            for r in 0..layer.wuk.rows() {
                let src = layer.wuk.row(r);
                let dst = out.wuk.row_mut(r);
                for a in 0..w {
                    dst[idx[a]] = (0..w).map(|b| src[idx[b]] * u.get(b, a)).sum();
                }
            }
        }
    }
    Ok(out)
}

/// One row of the per-dimension key norm table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyNormRow {
    pub dim: usize,
    pub pre: f64,
    pub rorope: f64,
    pub freqfold: f64,
}

/// Norms before rotation, after unfolded rotation, and after folded rotation.
pub fn key_norm_rows<T: Scalar>(
    unfolded: &FreqStats<T>,
    unfolded_rot: &RotationSet<T>,
    folded: &FreqStats<T>,
    folded_rot: &RotationSet<T>,
) -> Result<Vec<KeyNormRow>> {
    let pre = unfolded.rms();
    let ro = unfolded.rotated_rms(unfolded_rot)?;
    let ff = folded.rotated_rms(folded_rot)?;
    Ok((0..pre.len())
        .map(|dim| KeyNormRow {
            dim,
            pre: pre[dim],
            rorope: ro[dim],
            freqfold: ff[dim],
        })
        .collect())
}

/// Mean squared key energy in the leading `n_keep` heads after `rot`.
pub fn leading_energy<T: Scalar>(stats: &FreqStats<T>, rot: &RotationSet<T>, n_keep: usize) -> Result<f64> {
    let rms = stats.rotated_rms(rot)?;
    Ok(rms[..n_keep * stats.head_dim].iter().map(|r| r * r).sum())
}

/// Merged layer with keys split into a RoPE part and a position-free part.
///
/// Query head `i` scores `[W_uk_rope,iᵀ q_i; W_uk_nope,iᵀ q_i]` against
/// `[RoPE(W_dk_rope x); W_dk_nope x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SplitKeyLayer<T> {
    pub hidden: usize,
    pub heads: usize,
    pub groups: usize,
    pub head_dim: usize,
    pub n_keep: usize,
    pub wq: Matrix<T>,
    /// `hd × r`
    pub wuk_rope: Matrix<T>,
    /// `hd × (gd − r)`
    pub wuk_nope: Matrix<T>,
    /// `r × D`
    pub wdk_rope: Matrix<T>,
    /// `(gd − r) × D`
    pub wdk_nope: Matrix<T>,
    /// `gd × D`
    pub wdv: Matrix<T>,
    /// `hd × gd`
    pub wuv: Matrix<T>,
    pub wo: Matrix<T>,
    /// `d`-wide schedule, applied to each head of the RoPE part.
    pub rope: RopeSchedule<T>,
    /// Product of all balance factors applied so far.
    pub alpha: T,
}

pub fn split_rope_nope<T: Scalar>(layer: &MergedGqaLayer<T>, n_keep: usize) -> Result<SplitKeyLayer<T>> {
    let (d, gd) = (layer.head_dim, layer.key_dim());
    if n_keep > layer.groups {
        return Err(Error::config(format!(
            "cannot keep {n_keep} rope heads out of {}",
            layer.groups
        )));
    }
    let r = n_keep * d;
    Ok(SplitKeyLayer {
        hidden: layer.hidden,
        heads: layer.heads,
        groups: layer.groups,
        head_dim: d,
        n_keep,
        wq: layer.wq.clone(),
        wuk_rope: layer.wuk.slice_cols(0..r),
        wuk_nope: layer.wuk.slice_cols(r..gd),
        wdk_rope: layer.wk.slice_rows(0..r),
        wdk_nope: layer.wk.slice_rows(r..gd),
        wdv: layer.wv.clone(),
        wuv: layer.wuv.clone(),
        wo: layer.wo.clone(),
        rope: layer.rope.clone(),
        alpha: T::one(),
    })
}

impl<T: Scalar> SplitKeyLayer<T> {
    pub fn rope_dim(&self) -> usize {
        self.n_keep * self.head_dim
    }

    pub fn nope_dim(&self) -> usize {
        self.groups * self.head_dim - self.rope_dim()
    }

    pub fn scale(&self) -> T {
        T::one() / T::lit(self.head_dim as f64).sqrt()
    }

    /// `h·gd × D`, per head `[W_uk_rope,iᵀ W_q,i; W_uk_nope,iᵀ W_q,i]`.
    fn absorbed_query(&self) -> Matrix<T> {
        let d = self.head_dim;
        let blocks: Vec<Matrix<T>> = (0..self.heads)
            .flat_map(|i| {
                let band = i * d..(i + 1) * d;
                let q = self.wq.slice_rows(band.clone());
                [
                    self.wuk_rope.slice_rows(band.clone()).t_matmul(&q),
                    self.wuk_nope.slice_rows(band).t_matmul(&q),
                ]
            })
            .collect();
        let refs: Vec<&Matrix<T>> = blocks.iter().collect();
        Matrix::vstack(&refs)
    }

    fn rotated_qk(&self, x: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let (r, gd) = (self.rope_dim(), self.groups * self.head_dim);
        let mut q = x.matmul_t(&self.absorbed_query());
        let mut k = x.matmul_t(&Matrix::vstack(&[&self.wdk_rope, &self.wdk_nope]));
        for t in 0..x.rows() {
            for head in q.row_mut(t).chunks_exact_mut(gd) {
                self.rope.apply_blocks(&mut head[..r], t);
            }
            self.rope.apply_blocks(&mut k.row_mut(t)[..r], t);
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
        let v = x.matmul_t(&self.wdv);
        let o = causal_attention(&q, &k, &v, self.heads, 1, self.scale());
        Ok(expand_values(&o, &self.wuv, self.heads, self.head_dim).matmul_t(&self.wo))
    }
}

/// Top-1 variance per group summed (`V1`) and top-`M` variance of the
/// concatenated groups (`V2`). Groups are used as given, without centering.
pub fn group_variance_values(groups: &[Matrix<f64>]) -> Result<(f64, f64)> {
    let first = groups.first().ok_or_else(|| Error::config("no groups"))?;
    let (n, dp) = first.shape();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if groups.iter().any(|g| g.shape() != (n, dp)) {
        return Err(Error::shape("groups must share one shape"));
    }
    let cov = |x: &Matrix<f64>| x.t_matmul(x).scale(1.0 / (n as f64 - 1.0));
    let mut v1 = 0.0;
    for g in groups {
        v1 += sym_eig(&cov(g))?.eigenvalues[0];
    }
    let refs: Vec<&Matrix<f64>> = groups.iter().collect();
    let concat = Matrix::hstack(&refs);
    let v2 = sym_eig(&cov(&concat))?.leading_sum(groups.len());
    Ok((v1, v2))
}

/// Random correlated, mean-centered groups: a shared latent plus noise.
pub fn group_variance_check(m_groups: usize, d_prime: usize, n: usize, seed: u64) -> Result<(f64, f64)> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    if m_groups == 0 || d_prime == 0 {
        return Err(Error::config("need at least one group of positive width"));
    }
    let mut rng = crate::io::synth::rng(seed, 0);
    let mut normal = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let latent = normal(n, d_prime);
    let groups: Vec<Matrix<f64>> = (0..m_groups)
        .map(|_| {
            let mix = normal(d_prime, d_prime);
            let noise = normal(n, d_prime).scale(0.3);
            let x = latent.matmul(&mix).add(&noise);
            x.sub_row_vector(&x.column_means())
        })
        .collect();
    group_variance_values(&groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_layout() {
        let (re, im) = group_indices(1, 2, 2, 8);
        assert_eq!(re, vec![4, 6, 12, 14]);
        assert_eq!(im, vec![5, 7, 13, 15]);
    }

    #[test]
    fn single_sample_moments() {
        let mut s = FreqStats::<f64>::empty(1, 1, 2).unwrap();
        s.accumulate(&Matrix::new(1, 2, vec![3.0, -2.0]).unwrap()).unwrap();
        assert_eq!(s.sigma_x[0].data(), &[9.0]);
        assert_eq!(s.sigma_y[0].data(), &[4.0]);
    }

    #[test]
    fn sorted_diagonal_gives_identity_rotation() {
        let mut s = FreqStats::<f64>::empty(1, 3, 2).unwrap();
        s.sigma_x[0] = Matrix::diag(&[3.0, 2.0, 1.0]);
        s.sample_count = 1;
        let rot = solve_rotations(&s).unwrap();
        assert_eq!(rot.rotations[0], Matrix::identity(3));

        s.sigma_x[0] = Matrix::diag(&[1.0, 2.0, 3.0]);
        let rot = solve_rotations(&s).unwrap();
        let rev = Matrix::from_fn(3, 3, |r, c| if r + c == 2 { 1.0 } else { 0.0 });
        assert_eq!(rot.rotations[0], rev);
    }

    #[test]
    fn bad_group_size() {
        assert!(FreqStats::<f64>::empty(3, 2, 8).is_err());
        assert!(RotationSet::<f64>::identity(0, 2, 8).is_err());
    }
}

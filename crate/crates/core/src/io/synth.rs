//! Seeded generators for toy layers and calibration activations.
//!
//! Every tensor draws from its own ChaCha8 stream `(seed, index)`, so output
//! does not depend on generation order or thread count. Values are drawn in
//! `f64` and rounded to the target type afterwards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{GqaLayer, RopeSchedule};
use crate::error::{Error, Result};
use crate::rorope::RotationSet;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal(seed: u64, stream: u64, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    let mut r = rng(seed, stream);
    Matrix::from_fn(rows, cols, |_, _| scale * r.sample::<f64, _>(StandardNormal))
}

/// Random GQA layer with `N(0, 1/D)` weights.
pub fn synth_gqa<T: Scalar>(
    seed: u64,
    hidden: usize,
    heads: usize,
    groups: usize,
    rope_base: f64,
) -> Result<GqaLayer<T>> {
    if heads == 0 || hidden % heads != 0 {
        return Err(Error::config(format!("hidden {hidden} not divisible by {heads} heads")));
    }
    if groups == 0 || heads % groups != 0 {
        return Err(Error::config(format!("groups ({groups}) must divide heads ({heads})")));
    }
    let d = hidden / heads;
    let s = 1.0 / (hidden as f64).sqrt();
    GqaLayer::new(
        heads,
        groups,
        normal(seed, 0, heads * d, hidden, s).cast(),
        normal(seed, 1, groups * d, hidden, s).cast(),
        normal(seed, 2, groups * d, hidden, s).cast(),
        normal(seed, 3, hidden, heads * d, s).cast(),
        RopeSchedule::standard(d, rope_base)?,
    )
}

/// Like [`synth_gqa`], but keys read only the first half of the hidden
/// coordinates and values only the second half.
///
/// Paired with [`CalibStructure::KeyDominant`] this produces key activations
/// that are larger than value activations by the dominance factor.
pub fn synth_gqa_kv_split<T: Scalar>(
    seed: u64,
    hidden: usize,
    heads: usize,
    groups: usize,
    rope_base: f64,
) -> Result<GqaLayer<T>> {
    let mut layer = synth_gqa::<T>(seed, hidden, heads, groups, rope_base)?;
    let half = hidden / 2;
    for r in 0..layer.wk.rows() {
        layer.wk.row_mut(r)[half..].iter_mut().for_each(|v| *v = T::zero());
        layer.wv.row_mut(r)[..half].iter_mut().for_each(|v| *v = T::zero());
    }
    Ok(layer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibStructure {
    /// Independent standard normal coordinates.
    Iid,
    /// Samples confined to one random `r`-dim subspace.
    LowRank(usize),
    /// Standard normal with the first half of the coordinates scaled up.
    KeyDominant(f64),
}

pub fn synth_calib<T: Scalar>(seed: u64, n: usize, hidden: usize, structure: CalibStructure) -> Result<Matrix<T>> {
    if n == 0 {
        return Err(Error::config("calibration stream needs at least one sample"));
    }
    let x = match structure {
        CalibStructure::Iid => normal(seed, 16, n, hidden, 1.0),
        CalibStructure::LowRank(r) => {
            if r > hidden {
                return Err(Error::config(format!("rank {r} exceeds hidden {hidden}")));
            }
            let z = normal(seed, 16, n, r, 1.0);
            let basis = normal(seed, 17, r, hidden, 1.0 / (r.max(1) as f64).sqrt());
            z.matmul(&basis)
        }
        CalibStructure::KeyDominant(factor) => {
            if !(factor.is_finite() && factor > 0.0) {
                return Err(Error::config(format!("dominance factor {factor} must be positive")));
            }
            let mut x = normal(seed, 16, n, hidden, 1.0);
            for t in 0..n {
                x.row_mut(t)[..hidden / 2].iter_mut().for_each(|v| *v *= factor);
            }
            x
        }
    };
    Ok(x.cast())
}

/// Haar-distributed orthogonal `n × n` matrix.
pub fn random_orthogonal(seed: u64, stream: u64, n: usize) -> Matrix<f64> {
    let a = normal(seed, stream, n, n, 1.0);
    // modified Gram-Schmidt on columns
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    for j in 0..n {
        for i in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let p = crate::tensor::dot(&done[i], &rest[0]);
            crate::tensor::axpy(&mut rest[0], -p, &done[i]);
        }
        let norm = crate::tensor::norm2(&cols[j]);
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    Matrix::from_fn(n, n, |r, c| cols[c][r])
}

/// Random orthogonal rotation per frequency group.
pub fn random_rotation_set(seed: u64, group_size: usize, heads: usize, head_dim: usize) -> Result<RotationSet<f64>> {
    let mut set = RotationSet::identity(group_size, heads, head_dim)?;
    for (i, u) in set.rotations.iter_mut().enumerate() {
        *u = random_orthogonal(seed, 64 + i as u64, group_size * heads);
    }
    Ok(set)
}

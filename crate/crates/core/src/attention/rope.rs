//! Rotary position embedding with interleaved pairs `(2l, 2l+1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-pair rotation frequencies for one head of dimension `2 · thetas.len()`.
///
/// `standard` builds `θ_l = base^(−2l/d)`; folded and repeated schedules keep
/// arbitrary positive frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RopeSchedule<T> {
    thetas: Vec<T>,
}

impl<T: Scalar> RopeSchedule<T> {
    pub fn standard(dim: usize, base: f64) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::config(format!("rope dimension {dim} is odd")));
        }
        if !(base.is_finite() && base >= 1.0) {
            return Err(Error::config(format!("rope base {base} must be >= 1")));
        }
        let thetas = (0..dim / 2)
            .map(|l| T::lit(base.powf(-2.0 * l as f64 / dim as f64)))
            .collect();
        Ok(Self { thetas })
    }

    pub fn from_thetas(thetas: Vec<T>) -> Result<Self> {
        if thetas.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("rope thetas"));
        }
        Ok(Self { thetas })
    }

    pub fn empty() -> Self {
        Self { thetas: Vec::new() }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        2 * self.thetas.len()
    }

    #[inline]
    pub fn thetas(&self) -> &[T] {
        &self.thetas
    }

    pub fn cast<U: Scalar>(&self) -> RopeSchedule<U> {
        RopeSchedule {
            thetas: self.thetas.iter().map(|t| U::lit(t.to_f64_lossy())).collect(),
        }
    }

    /// Replaces each run of `group` consecutive frequencies by its first one.
    pub fn folded(&self, group: usize) -> Result<Self> {
        let pairs = self.thetas.len();
        if group == 0 || pairs % group != 0 {
            return Err(Error::config(format!(
                "fold group {group} does not divide {pairs} frequency pairs"
            )));
        }
        let thetas = (0..pairs).map(|l| self.thetas[l - l % group]).collect();
        Ok(Self { thetas })
    }

    /// True when every run of `group` consecutive frequencies is constant.
    pub fn is_folded(&self, group: usize) -> bool {
        group > 0 && self.thetas.len() % group == 0 && self.thetas.chunks(group).all(|c| c.iter().all(|&t| t == c[0]))
    }

    /// Schedule for `times` heads laid side by side.
    pub fn repeated(&self, times: usize) -> Self {
        Self {
            thetas: self.thetas.repeat(times),
        }
    }

    /// Rotates `x` (length `dim()`) in place for position `pos`.
    pub fn apply(&self, x: &mut [T], pos: usize) {
        debug_assert_eq!(x.len(), self.dim());
        let p = pos as f64;
        for (pair, &theta) in x.chunks_exact_mut(2).zip(&self.thetas) {
            let (s, c) = (p * theta.to_f64_lossy()).sin_cos();
            let (s, c) = (T::lit(s), T::lit(c));
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }

    /// Applies the schedule to every `dim()`-wide block of `x`.
    pub fn apply_blocks(&self, x: &mut [T], pos: usize) {
        let d = self.dim();
        if d == 0 {
            return;
        }
        debug_assert_eq!(x.len() % d, 0);
        for block in x.chunks_exact_mut(d) {
            self.apply(block, pos);
        }
    }
}

/// RoPE of a single vector at position `t`.
pub fn apply_rope<T: Scalar>(x: &[T], t: usize, sched: &RopeSchedule<T>) -> Result<Vec<T>> {
    if x.len() % 2 != 0 {
        return Err(Error::shape(format!("rope input has odd length {}", x.len())));
    }
    if x.len() != sched.dim() {
        return Err(Error::shape(format!(
            "rope input length {} != schedule dim {}",
            x.len(),
            sched.dim()
        )));
    }
    let mut out = x.to_vec();
    sched.apply(&mut out, t);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_thetas() {
        let s = RopeSchedule::<f64>::standard(8, 10000.0).unwrap();
        assert_eq!(s.thetas()[0], 1.0);
        assert!(s.thetas().windows(2).all(|w| w[0] > w[1]));
        assert!((s.thetas()[1] - 0.1).abs() < 1e-15);
        assert!(RopeSchedule::<f64>::standard(7, 10000.0).is_err());
    }

    #[test]
    fn hand_value_d2() {
        let s = RopeSchedule::<f64>::standard(2, 10000.0).unwrap();
        let y = apply_rope(&[1.0, 0.0], 1, &s).unwrap();
        assert!((y[0] - 1f64.cos()).abs() < 1e-12);
        assert!((y[1] - 1f64.sin()).abs() < 1e-12);
        assert!((y[0] - 0.540302).abs() < 1e-6);
        assert!((y[1] - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn odd_input_rejected() {
        let s = RopeSchedule::<f64>::standard(2, 10000.0).unwrap();
        assert!(apply_rope(&[1.0, 2.0, 3.0], 0, &s).is_err());
    }

    #[test]
    fn folding() {
        let s = RopeSchedule::<f64>::standard(8, 10000.0).unwrap();
        let f = s.folded(2).unwrap();
        assert_eq!(f.thetas()[1], s.thetas()[0]);
        assert_eq!(f.thetas()[3], s.thetas()[2]);
        assert!(f.is_folded(2));
        assert!(!s.is_folded(2));
        assert!(s.is_folded(1));
        assert!(s.folded(3).is_err());
    }
}

//! Symmetric eigendecomposition, covariance and orthogonality checks.
//!
//! The eigensolver is Householder tridiagonalisation followed by implicit QL
//! with Wilkinson shifts, accumulating the orthogonal transforms.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

/// Eigenpairs of a symmetric matrix.
///
/// `eigenvalues` are non-increasing; column `j` of `eigenvectors` pairs with
/// `eigenvalues[j]`. Equal eigenvalues keep the order produced by the QL
/// sweep, which for already-diagonal input is the original index order.
#[derive(Debug, Clone)]
pub struct EigResult<T> {
    pub eigenvalues: Vec<T>,
    pub eigenvectors: Matrix<T>,
}

impl<T: Scalar> EigResult<T> {
    /// First `k` eigenvector columns as a `dim × k` matrix.
    pub fn leading_vectors(&self, k: usize) -> Matrix<T> {
        self.eigenvectors.slice_cols(0..k)
    }

    pub fn leading_sum(&self, k: usize) -> T {
        self.eigenvalues.iter().take(k).copied().sum()
    }

    /// `V · diag(λ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let v = &self.eigenvectors;
        let n = v.rows();
        Matrix::from_fn(n, n, |r, c| {
            (0..n).map(|k| v.get(r, k) * self.eigenvalues[k] * v.get(c, k)).sum()
        })
    }
}

/// Eigendecomposition of a (numerically) symmetric matrix.
///
/// The input is symmetrised as `(S + Sᵀ)/2` first.
pub fn sym_eig<T: Scalar>(s: &Matrix<T>) -> Result<EigResult<T>> {
    let (rows, cols) = s.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if !s.is_finite() {
        return Err(Error::NonFinite("sym_eig input"));
    }
    let n = rows;
    if n == 0 {
        return Ok(EigResult {
            eigenvalues: Vec::new(),
            eigenvectors: Matrix::zeros(0, 0),
        });
    }
    let half = T::lit(0.5);
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|r| (0..n).map(|c| (s.get(r, c) + s.get(c, r)) * half).collect())
        .collect();
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep their relative order
    order.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).expect("finite eigenvalues"));

    let eigenvalues = order.iter().map(|&i| d[i]).collect();
    let mut eigenvectors = Matrix::from_fn(n, n, |r, c| v[r][order[c]]);
    normalize_signs(&mut eigenvectors);
    Ok(EigResult {
        eigenvalues,
        eigenvectors,
    })
}

/// Makes the largest-magnitude entry of each column positive.
fn normalize_signs<T: Scalar>(v: &mut Matrix<T>) {
    for c in 0..v.cols() {
        let mut pivot = 0;
        let mut best = T::zero();
        for r in 0..v.rows() {
            let a = v.get(r, c).abs();
            if a > best {
                best = a;
                pivot = r;
            }
        }
        if v.get(pivot, c) < T::zero() {
            for r in 0..v.rows() {
                let x = v.get(r, c);
                v.set(r, c, -x);
            }
        }
    }
}

fn tred2<T: Scalar>(v: &mut [Vec<T>], d: &mut [T], e: &mut [T]) {
    let n = d.len();
    let zero = T::zero();
    d.copy_from_slice(&v[n - 1]);

    for i in (1..n).rev() {
        let mut scale = zero;
        let mut h = zero;
        for &dk in d.iter().take(i) {
            scale = scale + dk.abs();
        }
        if scale == zero {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = zero;
                v[j][i] = zero;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk = *dk / scale;
                h = h + *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > zero {
                g = -g;
            }
            e[i] = scale * g;
            h = h - f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = zero;
            }
            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in (j + 1)..i {
                    g = g + v[k][j] * d[k];
                    e[k] = e[k] + v[k][j] * f;
                }
                e[j] = g;
            }
            f = zero;
            for j in 0..i {
                e[j] = e[j] / h;
                f = f + e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] = e[j] - hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] = v[k][j] - (f * e[k] + g * d[k]);
                }
                d[j] = v[i - 1][j];
                v[i][j] = zero;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = T::one();
        let h = d[i + 1];
        if h != zero {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = zero;
                for k in 0..=i {
                    g = g + v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] = v[k][j] - g * d[k];
                }
            }
        }
        for row in v.iter_mut().take(i + 1) {
            row[i + 1] = zero;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = zero;
    }
    v[n - 1][n - 1] = T::one();
    e[0] = zero;
}

fn tql2<T: Scalar>(v: &mut [Vec<T>], d: &mut [T], e: &mut [T]) -> Result<()> {
    let n = d.len();
    let zero = T::zero();
    let one = T::one();
    let two = T::lit(2.0);
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = zero;

    let mut f = zero;
    let mut tst1 = zero;
    let eps = T::epsilon();
    let max_iter = 64 * n.max(1);

    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m == n {
            m = n - 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > max_iter {
                    return Err(Error::EigenFailure);
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(one);
                if p < zero {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di = *di - h;
                }
                f = f + h;

                p = d[m];
                let mut c = one;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = zero;
                let mut s2 = zero;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] = d[l] + f;
        e[l] = zero;
    }
    Ok(())
}

/// Uncentred second-moment matrix `XᵀX / (n − 1)` of `n` samples in rows.
///
/// Callers that want a true covariance centre `x` first.
pub fn covariance<T: Scalar>(x: &Matrix<T>) -> Result<Matrix<T>> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let denom = T::lit((n - 1) as f64);
    Ok(x.t_matmul(x).map(|v| v / denom))
}

/// `max |UᵀU − I|`.
pub fn orthonormal_defect<T: Scalar>(u: &Matrix<T>) -> T {
    let gram = u.t_matmul(u);
    let mut worst = T::zero();
    for r in 0..gram.rows() {
        for c in 0..gram.cols() {
            let target = if r == c { T::one() } else { T::zero() };
            worst = worst.max((gram.get(r, c) - target).abs());
        }
    }
    worst
}

/// Singular values in non-increasing order, by one-sided Jacobi.
///
/// Small singular values are resolved to roughly `ε·σ_max`, which the
/// `AᵀA` eigenvalue route cannot do.
pub fn singular_values<T: Scalar>(a: &Matrix<T>) -> Vec<T> {
    let work = if a.cols() > a.rows() { a.clone() } else { a.transpose() };
    // rows of `work` are the columns being orthogonalised
    let k = work.rows();
    let mut cols: Vec<Vec<T>> = (0..k).map(|r| work.row(r).to_vec()).collect();
    let eps = T::epsilon();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let xp = *x;
                    let yq = *y;
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<T> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    sv
}

/// Number of singular values above `rel_tol · σ_max`.
pub fn numerical_rank<T: Scalar>(a: &Matrix<T>, rel_tol: T) -> usize {
    let sv = singular_values(a);
    let top = sv.first().copied().unwrap_or_else(T::zero);
    if top == T::zero() {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual(s: &Matrix<f64>, eig: &EigResult<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..s.rows() {
            let v = eig.eigenvectors.column(j);
            let sv = s.matvec(&v);
            let r: f64 = sv
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - eig.eigenvalues[j] * b).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(r);
        }
        worst
    }

    #[test]
    fn identity_eigenpairs() {
        let eig = sym_eig(&Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0, 1.0, 1.0]);
        assert_eq!(eig.eigenvectors, Matrix::identity(3));
    }

    #[test]
    fn diagonal_sorted_with_permutation() {
        let eig = sym_eig(&Matrix::diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(eig.eigenvalues, vec![3.0, 2.0, 1.0]);
        assert_eq!(eig.eigenvectors.column(0), vec![1.0, 0.0, 0.0]);
        assert_eq!(eig.eigenvectors.column(1), vec![0.0, 0.0, 1.0]);
        assert_eq!(eig.eigenvectors.column(2), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(matches!(
            sym_eig(&Matrix::<f64>::zeros(2, 3)),
            Err(Error::NotSquare { .. })
        ));
        assert!(matches!(
            covariance(&Matrix::<f64>::zeros(1, 3)),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn known_two_by_two() {
        let s = Matrix::new(2, 2, vec![2.0f64, 1.0, 1.0, 2.0]).unwrap();
        let eig = sym_eig(&s).unwrap();
        assert!((eig.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((eig.eigenvalues[1] - 1.0).abs() < 1e-14);
        assert!(residual(&s, &eig) < 1e-13);
        assert!(orthonormal_defect(&eig.eigenvectors) < 1e-14);
    }

    #[test]
    fn covariance_hand_value() {
        let x = Matrix::new(2, 1, vec![1.0, -1.0]).unwrap();
        assert_eq!(covariance(&x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let u = Matrix::new(2, 2, vec![c, -s, s, c]).unwrap();
        assert!(orthonormal_defect(&u) <= 1e-12);
        let dup = Matrix::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(orthonormal_defect(&dup) >= 1.0);
    }

    #[test]
    fn singular_values_of_rank_one() {
        let a = Matrix::from_fn(4, 3, |r, c| (r as f64 + 1.0) * (c as f64 - 1.5));
        let sv = singular_values(&a);
        assert!(sv[1] < 1e-12 * sv[0]);
        assert_eq!(numerical_rank(&a, 1e-8), 1);
        let expected = a.frobenius();
        assert!((sv[0] - expected).abs() < 1e-12);
    }
}

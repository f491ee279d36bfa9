//! Small dense helpers: pseudo-inverse solves with range checks, norms, and
//! allocation-free mat-vec kernels on flat slices.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative cutoff for discarding small eigen/singular values.
pub const PINV_CUTOFF: f64 = 1e-10;
/// Relative tolerance of the range-inclusion test.
pub const RANGE_TOL: f64 = 1e-8;
/// Relative Frobenius tolerance for symmetry.
pub const SYM_TOL: f64 = 1e-12;

/// Relative Frobenius asymmetry ‖M−Mᵀ‖/max(1,‖M‖).
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    if m.nrows() != m.ncols() {
        return f64::INFINITY;
    }
    (m - m.transpose()).norm() / m.norm().max(1.0)
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    asymmetry(m) <= tol
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Max-row-sum norm.
pub fn row_sum_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let s = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(s).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn in_range(m: &DMatrix<f64>, sol: &DMatrix<f64>, rhs: &DMatrix<f64>) -> bool {
    (m * sol - rhs).norm() <= RANGE_TOL * (1.0 + rhs.norm())
}

/// `M†·rhs` for symmetric `M` via eigendecomposition, plus the range flag
/// `‖M·M†·rhs − rhs‖ ≤ 1e-8·(1+‖rhs‖)`.
pub fn pinv_apply(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let asym = asymmetry(m);
    if asym > SYM_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let cut = PINV_CUTOFF * lmax;
    let v = &eig.eigenvectors;
    let mut proj = v.transpose() * rhs;
    for (i, l) in eig.eigenvalues.iter().enumerate() {
        let f = if lmax > 0.0 && l.abs() > cut { 1.0 / l } else { 0.0 };
        proj.row_mut(i).scale_mut(f);
    }
    let sol = v * proj;
    let ok = in_range(m, &sol, rhs);
    Ok((sol, ok))
}

/// Pseudo-inverse solve for a general square matrix via SVD, same cutoff and
/// range test as [`pinv_apply`].
pub fn pinv_apply_general(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, s| a.max(*s));
    let cut = PINV_CUTOFF * smax;
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let mut proj = u.transpose() * rhs;
    for (i, s) in svd.singular_values.iter().enumerate() {
        let f = if smax > 0.0 && *s > cut { 1.0 / s } else { 0.0 };
        proj.row_mut(i).scale_mut(f);
    }
    let sol = vt.transpose() * proj;
    let ok = in_range(m, &sol, rhs);
    (sol, ok)
}

/// Symmetric route when `m` is symmetric, SVD otherwise.
pub fn pinv_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    match pinv_apply(m, rhs) {
        Ok(r) => r,
        Err(_) => pinv_apply_general(m, rhs),
    }
}

/// out += s · M x
#[inline]
pub fn mv_add(out: &mut [f64], m: &DMatrix<f64>, x: &[f64], s: f64) {
    let (r, c) = m.shape();
    debug_assert_eq!(out.len(), r);
    debug_assert_eq!(x.len(), c);
    for j in 0..c {
        let xj = s * x[j];
        if xj == 0.0 {
            continue;
        }
        let col = m.column(j);
        for i in 0..r {
            out[i] += col[i] * xj;
        }
    }
}

/// ⟨M x, x⟩
#[inline]
pub fn quad(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += m[(i, j)] * x[i];
        }
        acc += col * x[j];
    }
    acc
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pairwise summation, deterministic for a fixed input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn identity_solve() {
        let r = col(&[1.0, -2.0, 3.0]);
        let (s, ok) = pinv_apply(&DMatrix::identity(3, 3), &r).unwrap();
        assert!(ok);
        assert!((s - r).norm() < 1e-15);
    }

    #[test]
    fn zero_in_zero_range() {
        let (s, ok) = pinv_apply(&DMatrix::zeros(2, 2), &col(&[0.0, 0.0])).unwrap();
        assert!(ok);
        assert_eq!(s.norm(), 0.0);
    }

    #[test]
    fn rank_deficient_out_of_range() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let (s, ok) = pinv_apply(&m, &col(&[0.0, 1.0])).unwrap();
        assert!(!ok);
        assert!(s.norm() < 1e-15);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(pinv_apply(&m, &col(&[1.0, 1.0])), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn general_matches_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
        let r = col(&[1.0, 1.0]);
        let (s, ok) = pinv_apply_general(&m, &r);
        assert!(ok);
        let exact = m.clone().try_inverse().unwrap() * &r;
        assert!((s - exact).norm() < 1e-14);
    }

    #[test]
    fn row_sum() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 0.5]);
        assert_eq!(row_sum_norm(&m), 3.0);
    }

    proptest! {
        #[test]
        fn pinv_is_moore_penrose(a in proptest::collection::vec(-1.0f64..1.0, 6), rank1 in any::<bool>()) {
            // symmetric 3x3, optionally rank one
            let m = if rank1 {
                let v = col(&a[..3]);
                &v * v.transpose()
            } else {
                let f = DMatrix::from_row_slice(2, 3, &a);
                f.transpose() * f
            };
            let r = col(&[0.3, -0.7, 1.1]);
            let (x, _) = pinv_apply(&m, &r).unwrap();
            // M M† M = M applied to the projection: M x is the projection of r onto range(M)
            let mx = &m * &x;
            let (x2, ok) = pinv_apply(&m, &mx).unwrap();
            prop_assert!(ok);
            prop_assert!((x2 - &x).norm() <= 1e-6 * (1.0 + x.norm()));
        }

        #[test]
        fn pairwise_is_close_to_naive(xs in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
            let naive: f64 = xs.iter().sum();
            prop_assert!((pairwise_sum(&xs) - naive).abs() <= 1e-9 * (1.0 + naive.abs()) + 1e-9);
        }
    }
}

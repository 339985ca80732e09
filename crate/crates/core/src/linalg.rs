//! Dense symmetric-matrix helpers shared by every solver.
//!
//! Everything that touches a possibly indefinite matrix goes through the
//! symmetric eigendecomposition; no Cholesky anywhere.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Returns `(X + Xᵀ)/2`.
pub fn symmetrize(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x + x.transpose()) * 0.5
}

/// Frobenius norm of `X − Xᵀ` relative to `max(1, ‖X‖_F)`.
pub fn asymmetry(x: &DMatrix<f64>) -> f64 {
    let skew = (x - x.transpose()).norm();
    skew / x.norm().max(1.0)
}

pub fn sym_eigen(x: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let a = symmetrize(x);
    let mut eig = SymmetricEigen::new(a.clone());
    jacobi_polish(&a, &mut eig);
    eig
}

/// Cyclic Jacobi sweeps on `VᵀAV`. The implicit QR above can stop with
/// off-diagonal mass around `1e-10·‖A‖`; this drives it to roundoff.
fn jacobi_polish(a: &DMatrix<f64>, eig: &mut SymmetricEigen<f64, nalgebra::Dyn>) {
    let n = a.nrows();
    if n < 2 {
        return;
    }
    let v = &mut eig.eigenvectors;
    let mut b = symmetrize(&(v.transpose() * a * &*v));
    let floor = f64::EPSILON * b.norm();
    for _ in 0..30 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(b[(p, q)].abs());
            }
        }
        if off <= floor {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let bpq = b[(p, q)];
                if bpq.abs() <= 0.1 * floor {
                    continue;
                }
                let theta = (b[(q, q)] - b[(p, p)]) / (2.0 * bpq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (bkp, bkq) = (b[(k, p)], b[(k, q)]);
                    b[(k, p)] = c * bkp - s * bkq;
                    b[(k, q)] = s * bkp + c * bkq;
                }
                for k in 0..n {
                    let (bpk, bqk) = (b[(p, k)], b[(q, k)]);
                    b[(p, k)] = c * bpk - s * bqk;
                    b[(q, k)] = s * bpk + c * bqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    for k in 0..n {
        eig.eigenvalues[k] = b[(k, k)];
    }
}

/// Smallest eigenvalue of a symmetric matrix; `+∞` for the empty matrix.
pub fn min_eig(x: &DMatrix<f64>) -> f64 {
    if x.nrows() == 0 {
        return f64::INFINITY;
    }
    sym_eigen(x).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of a symmetric matrix; `−∞` for the empty matrix.
pub fn max_eig(x: &DMatrix<f64>) -> f64 {
    if x.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    sym_eigen(x).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Counts of (negative, zero, positive) eigenvalues. An eigenvalue is zero
/// when `|λ| ≤ rel_tol · max|λ|`.
pub fn inertia(x: &DMatrix<f64>, rel_tol: f64) -> (usize, usize, usize) {
    if x.nrows() == 0 {
        return (0, 0, 0);
    }
    let ev = sym_eigen(x).eigenvalues;
    let scale = ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let cut = rel_tol * scale;
    let mut counts = (0, 0, 0);
    for &v in ev.iter() {
        if v.abs() <= cut || scale == 0.0 {
            counts.1 += 1;
        } else if v < 0.0 {
            counts.0 += 1;
        } else {
            counts.2 += 1;
        }
    }
    counts
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn sym_fn(x: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = sym_eigen(x);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    let v = &eig.eigenvectors;
    symmetrize(&(v * d * v.transpose()))
}

/// Principal square root of a positive semidefinite matrix. Small negative
/// eigenvalues from rounding are clamped to zero.
pub fn sym_sqrt(x: &DMatrix<f64>) -> DMatrix<f64> {
    sym_fn(x, |v| v.max(0.0).sqrt())
}

/// Symmetric inverse together with the reciprocal condition number
/// `min|λ| / max|λ|`.
pub fn sym_inverse(x: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    if x.nrows() == 0 {
        return (DMatrix::zeros(0, 0), 1.0);
    }
    let eig = sym_eigen(x);
    let abs_max = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let abs_min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let rcond = if abs_max == 0.0 { 0.0 } else { abs_min / abs_max };
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let v = &eig.eigenvectors;
    (symmetrize(&(v * d * v.transpose())), rcond)
}

/// Rank-revealing factor `C` with `CᵀC = X` for `X ⪰ 0`. Eigenvalues below
/// `rel_cut · trace(X)` are dropped; the result has one row per kept
/// eigenvalue.
pub fn psd_factor(x: &DMatrix<f64>, rel_cut: f64) -> DMatrix<f64> {
    let n = x.nrows();
    let eig = sym_eigen(x);
    let trace: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let cut = rel_cut * trace;
    let kept: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > cut && eig.eigenvalues[k] > 0.0).collect();
    let mut c = DMatrix::zeros(kept.len(), n);
    for (row, &k) in kept.iter().enumerate() {
        let s = eig.eigenvalues[k].sqrt();
        for col in 0..n {
            c[(row, col)] = s * eig.eigenvectors[(col, k)];
        }
    }
    c
}

/// Rows `[start, start + len)` of `x`.
pub fn rows(x: &DMatrix<f64>, start: usize, len: usize) -> DMatrix<f64> {
    x.rows(start, len).into_owned()
}

/// Columns `[start, start + len)` of `x`.
pub fn cols(x: &DMatrix<f64>, start: usize, len: usize) -> DMatrix<f64> {
    x.columns(start, len).into_owned()
}

/// Stacks `top` over `bottom`.
pub fn vstack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(top.ncols(), bottom.ncols());
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}

/// `[left right]`.
pub fn hstack(left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(left.nrows(), right.nrows());
    let mut out = DMatrix::zeros(left.nrows(), left.ncols() + right.ncols());
    out.columns_mut(0, left.ncols()).copy_from(left);
    out.columns_mut(left.ncols(), right.ncols()).copy_from(right);
    out
}

/// Quadratic form `vᵀ X v`.
pub fn quad(x: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(x * v))
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

pub fn to_rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| (0..x.ncols()).map(|j| x[(i, j)]).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn eigendecomposition_reconstructs_to_roundoff() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let n = rng.random_range(2..7);
            let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-3.0..3.0));
            let a = symmetrize(&g);
            let eig = sym_eigen(&a);
            let v = &eig.eigenvectors;
            let back = v * DMatrix::from_diagonal(&eig.eigenvalues) * v.transpose();
            assert!((back - &a).amax() <= 1e-13 * a.norm());
            assert!((v.transpose() * v - DMatrix::identity(n, n)).amax() <= 1e-13);
        }
    }

    #[test]
    fn inertia_counts_signs() {
        let x = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 2.0, 1.0]);
        assert_eq!(inertia(&x, 1e-12), (1, 0, 1));
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(inertia(&z, 1e-12), (0, 1, 1));
    }

    #[test]
    fn sqrt_and_inverse() {
        let x = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = sym_sqrt(&x);
        assert!((&s * &s - &x).norm() < 1e-12);
        let (inv, rcond) = sym_inverse(&x);
        assert!((&inv * &x - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!(rcond > 0.3);
    }

    #[test]
    fn psd_factor_drops_null_directions() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = psd_factor(&x, 1e-12);
        assert_eq!(c.nrows(), 1);
        assert!((c.transpose() * &c - &x).norm() < 1e-12);
        let zero = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(psd_factor(&zero, 1e-12).nrows(), 0);
    }
}

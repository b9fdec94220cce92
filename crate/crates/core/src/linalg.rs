//! Dense symmetric eigensolvers used throughout the crate.
//!
//! Matrices here are small: C x C core matrices, and dim(theta) x dim(theta)
//! FIMs for desk-scale networks. The cyclic Jacobi method is exact to rounding
//! for both; power iteration takes over above [`JACOBI_MAX_DIM`].

use nalgebra::{DMatrix, DVector};

use crate::error::{FimError, Result};

/// Jacobi sweeps stop once the largest off-diagonal entry falls below this
/// fraction of the largest initial entry.
pub const JACOBI_TOL: f64 = 1e-13;
pub const JACOBI_MAX_SWEEPS: usize = 50;

/// Above this dimension, extreme eigenvalues come from power iteration.
pub const JACOBI_MAX_DIM: usize = 256;

/// Relative asymmetry accepted before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

pub const POWER_ITERS: usize = 100;
pub const POWER_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: DMatrix<f64>,
}

impl SymmetricEigen {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let n = self.values.len();
        let mut out = DMatrix::zeros(n, n);
        for (i, &lambda) in self.values.iter().enumerate() {
            let v = self.vectors.column(i);
            out += lambda * &v * v.transpose();
        }
        out
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn ensure_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(FimError::ShapeMismatch {
            op: "symmetric matrix",
            detail: format!("{}x{} is not square", m.nrows(), m.ncols()),
        });
    }
    let asymmetry = max_asymmetry(m);
    if !asymmetry.is_finite() || asymmetry > SYMMETRY_TOL * max_abs(m).max(1.0) {
        return Err(FimError::NotSymmetric { asymmetry });
    }
    Ok(())
}

/// Flips `v` so that its largest-magnitude entry is positive; ties go to the
/// lowest index.
pub fn canonicalize_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v.len() > 0 && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Rotations visit (p, q) pairs in row-major order. Eigenvalues come back in
/// ascending order and each eigenvector is sign-canonicalized.
pub fn jacobi_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen> {
    ensure_symmetric(m)?;
    let n = m.nrows();
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let threshold = JACOBI_TOL * max_abs(&a);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].abs());
            }
        }
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                a[(p, p)] -= t * apq;
                a[(q, q)] += t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for r in 0..n {
                    if r != p && r != q {
                        let arp = a[(r, p)];
                        let arq = a[(r, q)];
                        let new_rp = c * arp - s * arq;
                        let new_rq = s * arp + c * arq;
                        a[(r, p)] = new_rp;
                        a[(p, r)] = new_rp;
                        a[(r, q)] = new_rq;
                        a[(q, r)] = new_rq;
                    }
                }
                for r in 0..n {
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = c * vrp - s * vrq;
                    v[(r, q)] = s * vrp + c * vrq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col: DVector<f64> = v.column(src).into_owned();
        canonicalize_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok(SymmetricEigen { values, vectors })
}

fn power_start(n: usize) -> DVector<f64> {
    // Deterministic and generic enough to overlap every eigenvector.
    let v = DVector::from_iterator(n, (0..n).map(|i| 1.0 + ((i as f64) * 0.618_033_988_75).fract()));
    let norm = v.norm();
    v / norm
}

/// Largest eigenvalue of a symmetric matrix assumed positive semidefinite,
/// by plain power iteration.
fn power_top(m: &DMatrix<f64>, iters: usize, rel_tol: f64) -> f64 {
    let mut v = power_start(m.nrows());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= rel_tol * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

fn gershgorin_radius(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    ensure_symmetric(m)?;
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    if m.nrows() <= JACOBI_MAX_DIM {
        return Ok(jacobi_eigen(m)?.min());
    }
    let shift = gershgorin_radius(m);
    let n = m.nrows();
    let shifted = DMatrix::<f64>::identity(n, n) * shift - m;
    Ok(shift - power_top(&shifted, 20 * POWER_ITERS, 1e-14))
}

/// Spectral norm (largest |eigenvalue|) of a symmetric matrix.
///
/// Uses Jacobi up to [`JACOBI_MAX_DIM`]; beyond that, power iteration on the
/// squared matrix.
pub fn spectral_norm_symmetric(m: &DMatrix<f64>) -> Result<f64> {
    ensure_symmetric(m)?;
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    if m.nrows() <= JACOBI_MAX_DIM {
        let eig = jacobi_eigen(m)?;
        return Ok(eig.min().abs().max(eig.max().abs()));
    }
    let squared = m * m;
    Ok(power_top(&squared, POWER_ITERS, POWER_REL_TOL).max(0.0).sqrt())
}

/// Number of eigenvalues above `tol`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> Result<usize> {
    Ok(jacobi_eigen(m)?.values.iter().filter(|&&l| l > tol).count())
}

/// Symmetric square root of a positive semidefinite matrix; negative rounding
/// residue in the spectrum is clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = jacobi_eigen(m)?;
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let v = eig.vectors.column(i);
        out += eig.values[i].max(0.0).sqrt() * &v * v.transpose();
    }
    Ok(out)
}

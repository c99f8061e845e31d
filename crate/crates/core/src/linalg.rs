//! Small dense linear algebra on row-major `Vec<f64>` storage.
//!
//! Sizes in this crate stay below a few hundred, so everything here is the
//! textbook O(n³) algorithm with no blocking.

use crate::error::{LabError, Result};

/// Off-diagonal Frobenius threshold at which Jacobi sweeps stop.
pub const JACOBI_OFF_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// `y = M x` for a row-major `n×n` matrix.
pub fn matvec(m: &[f64], x: &[f64], y: &mut [f64]) {
    let n = x.len();
    for (i, yi) in y.iter_mut().enumerate() {
        let row = &m[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += row[j] * x[j];
        }
        *yi = acc;
    }
}

/// `y = Mᵀ x`.
///
/// Accumulates over the same index order as [`matvec`], so for a symmetric
/// matrix both routines return bitwise-identical results.
pub fn matvec_t(m: &[f64], x: &[f64], y: &mut [f64]) {
    let n = x.len();
    y.iter_mut().for_each(|v| *v = 0.0);
    for (j, &xj) in x.iter().enumerate() {
        let row = &m[j * n..(j + 1) * n];
        for (yi, &mji) in y.iter_mut().zip(row) {
            *yi += mji * xj;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Dense `n×n` product, row-major.
pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Solves `M x = rhs` by Gaussian elimination with partial pivoting.
///
/// `pivot_tol` is an absolute threshold: a pivot with magnitude at or below it
/// reports [`LabError::SingularMatrix`] with the offending column.
pub fn solve(m: &[f64], rhs: &[f64], pivot_tol: f64) -> Result<Vec<f64>> {
    let n = rhs.len();
    assert_eq!(m.len(), n * n, "matrix/rhs size mismatch");
    let mut a = m.to_vec();
    let mut b = rhs.to_vec();
    for col in 0..n {
        let (piv_row, piv_abs) = (col..n)
            .map(|r| (r, a[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(piv_abs > pivot_tol) {
            return Err(LabError::SingularMatrix {
                column: col,
                pivot: piv_abs,
            });
        }
        if piv_row != col {
            for j in 0..n {
                a.swap(col * n + j, piv_row * n + j);
            }
            b.swap(col, piv_row);
        }
        let p = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= a[i * n + j] * x[j];
        }
        x[i] = acc / a[i * n + i];
    }
    Ok(x)
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues, in descending order (ties keep original index order).
    pub values: Vec<f64>,
    /// Row-major `n×n`; column `j` is the unit eigenvector of `values[j]`.
    pub vectors: Vec<f64>,
}

fn off_diag_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigenvalue algorithm for a symmetric `n×n` matrix.
///
/// Sweeps over all `(p, q)` pairs in row order, annihilating each off-diagonal
/// entry with a plane rotation, until the off-diagonal Frobenius norm drops
/// to [`JACOBI_OFF_TOL`] or [`JACOBI_MAX_SWEEPS`] sweeps have run.
pub fn jacobi_eigen(m: &[f64], n: usize) -> Result<SymEigen> {
    let mut a = m.to_vec();
    let mut v = identity(n);
    let mut sweeps = 0;
    loop {
        let off = off_diag_norm(&a, n);
        if off <= JACOBI_OFF_TOL {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LabError::JacobiNoConvergence {
                sweeps,
                off_norm: off,
            });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // Rotation angle from the symmetric Schur decomposition.
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the original index order among ties.
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + new_col] = v[r * n + old_col];
        }
    }
    Ok(SymEigen { values, vectors })
}

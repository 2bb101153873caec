//! One-sided (Hestenes) Jacobi SVD for small dense matrices.

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

/// Relative off-orthogonality below which a column pair counts as converged.
pub const JACOBI_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// Descending, length `min(rows, cols)`.
    pub singular_values: Vec<f64>,
    /// `M·V` restricted to the leading directions, `rows × r`; column `j` is `σ_j u_j`.
    pub scores: Matrix,
    /// Right singular vectors as columns, `cols × r`.
    pub right: Matrix,
}

/// Orthogonalizes the columns of `m` by plane rotations until every pair is
/// orthogonal to [`JACOBI_TOL`], accumulating the rotations into `V`.
pub fn jacobi_svd(m: &Matrix) -> Result<Svd> {
    let (rows, cols) = m.shape();
    let r = rows.min(cols);
    // columns stored as rows for contiguous access
    let mut w = m.transpose();
    let mut v = Matrix::identity(cols);
    let max_sweeps = (10 * r * r).max(10);
    // columns this small are numerically zero and left alone
    let frob2: f64 = m.as_slice().iter().map(|a| a * a).sum();
    let negligible = (f64::EPSILON * f64::EPSILON) * frob2;
    let mut converged = r == 0 || cols < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == max_sweeps {
            return Err(Error::ConvergenceFailure { sweeps });
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(w.row(p), w.row(p));
                let beta = dot(w.row(q), w.row(q));
                let gamma = dot(w.row(p), w.row(q));
                if alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !w.is_finite() {
        return Err(Error::ConvergenceFailure { sweeps });
    }
    let norms: Vec<f64> = w.iter_rows().map(norm).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    // stable sort keeps ties in column order, so output is deterministic
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let order = &order[..r];
    Ok(Svd {
        singular_values: order.iter().map(|&j| norms[j]).collect(),
        scores: Matrix::from_fn(rows, r, |i, j| w[(order[j], i)]),
        right: Matrix::from_fn(cols, r, |i, j| v[(order[j], i)]),
    })
}

fn rotate(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    for k in 0..cols {
        let a = m[(p, k)];
        let b = m[(q, k)];
        m[(p, k)] = c * a - s * b;
        m[(q, k)] = s * a + c * b;
    }
}

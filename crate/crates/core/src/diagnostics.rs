//! Collapse diagnostics: singular spectra, effective rank, PCA, the embedding
//! mean, gradient stationarity, and the one-step mean-shift bound together
//! with the learning-rate window it implies.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, random_raw, PairMap, RawEmbeddingSet, UnitEmbeddingSet};
use crate::error::{Error, Result};
use crate::linalg::jacobi_svd;
use crate::losses::{check_tau, infonce_grad_raw, prob_matrix, repulsive_grad_raw};
use crate::matrix::{norm, Matrix};
use crate::rng::Stream;

/// Relative threshold used for effective rank throughout the crate.
pub const EFFECTIVE_RANK_EPS: f64 = 1e-3;

/// Singular values of `m`, descending, length `min(rows, cols)`.
pub fn singular_spectrum(m: &Matrix) -> Result<Vec<f64>> {
    Ok(jacobi_svd(m)?.singular_values)
}

/// Number of singular values strictly above `eps_rel · spectrum[0]`.
pub fn effective_rank(spectrum: &[f64], eps_rel: f64) -> usize {
    match spectrum.first() {
        Some(&top) if top > 0.0 => spectrum.iter().filter(|&&s| s > eps_rel * top).count(),
        _ => 0,
    }
}

/// Projection of the mean-centred rows onto their top two principal directions.
/// Columns come out in descending variance; missing directions are zero.
pub fn pca2(m: &Matrix) -> Result<Matrix> {
    if m.rows() < 2 {
        return Err(Error::invalid("m", "PCA needs at least two points"));
    }
    let mean = m.column_means();
    let centred = Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] - mean[j]);
    let svd = jacobi_svd(&centred)?;
    let r = svd.scores.cols();
    let mut out = Matrix::from_fn(m.rows(), 2, |i, j| if j < r { svd.scores[(i, j)] } else { 0.0 });
    // sign convention: the largest-magnitude entry of each column is positive
    for j in 0..2 {
        let col = out.column(j);
        let lead = col.iter().fold(0.0f64, |b, &v| if v.abs() > b.abs() { v } else { b });
        if lead < 0.0 {
            for i in 0..out.rows() {
                out[(i, j)] = -out[(i, j)];
            }
        }
    }
    Ok(out)
}

/// `(μ, ‖μ‖₂)` with `μ = (1/N) Σ zᵢ`.
pub fn embedding_mean(z: &UnitEmbeddingSet) -> (Vec<f64>, f64) {
    let mu = z.data().column_means();
    let n = norm(&mu);
    (mu, n)
}

/// Checks whether the raw-space gradient vanishes.
///
/// Paired maps use InfoNCE; merged maps use the merged-pair repulsive loss.
/// Returns `(‖∂ℒ/∂X‖_∞ ≤ tol, ‖∂ℒ/∂X‖_∞)`.
pub fn stationarity_check(x: &RawEmbeddingSet, pairs: &PairMap, tau: f64, tol: f64) -> Result<(bool, f64)> {
    let g = match pairs {
        PairMap::Paired(_) => infonce_grad_raw(x, pairs, tau)?,
        PairMap::Merged(n) => {
            pairs.check_len(x.n_points())?;
            debug_assert_eq!(*n, x.n_points());
            repulsive_grad_raw(x, tau)?
        }
    };
    let inf = g.max_abs();
    Ok((inf <= tol, inf))
}

/// Learning-rate interval around `τ/2` that keeps the one-step mean-shift factor ≤ 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrWindow {
    pub eta_lo: f64,
    pub eta_hi: f64,
    pub midpoint: f64,
    pub tau: f64,
    pub sigma: f64,
    pub n_neg: usize,
}

impl LrWindow {
    pub fn contains(&self, eta: f64) -> bool {
        (self.eta_lo..=self.eta_hi).contains(&eta)
    }

    pub fn half_width(&self) -> f64 {
        self.eta_hi - self.midpoint
    }
}

/// `|1 − 2η/τ| · (2/σ²) · |𝒩|/(1+|𝒩|)`.
pub fn mean_shift_factor(tau: f64, sigma: f64, n_neg: usize, eta: f64) -> f64 {
    let n = n_neg as f64;
    (1.0 - 2.0 * eta / tau).abs() * (2.0 / (sigma * sigma)) * (n / (1.0 + n))
}

pub fn lr_window(tau: f64, sigma: f64, n_neg: usize) -> Result<LrWindow> {
    check_tau(tau)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("sigma", format!("must be positive, got {sigma}")));
    }
    if n_neg == 0 {
        return Err(Error::invalid("negatives", "need at least one negative"));
    }
    let n = n_neg as f64;
    let spread = sigma * sigma * (1.0 + n) / (2.0 * n);
    let midpoint = tau / 2.0;
    Ok(LrWindow {
        eta_lo: (midpoint * (1.0 - spread)).max(0.0),
        eta_hi: midpoint * (1.0 + spread),
        midpoint,
        tau,
        sigma,
        n_neg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckResult {
    /// `‖μ₁‖₂` of the normalized embeddings after one real descent step.
    pub lhs: f64,
    /// `|1 − 2η/τ| (2/σ²) |𝒩|/(1+|𝒩|) ‖μ₀‖₂`.
    pub rhs: f64,
    pub satisfied: bool,
    pub mu0_norm: f64,
    /// `max |P_ia − P_ai|` of the merged-pair probability matrix.
    pub max_p_asymmetry: f64,
    pub tau: f64,
    pub lr: f64,
    pub sigma: f64,
    pub n_neg: usize,
    pub n_points: usize,
    pub dim: usize,
}

/// Runs one repulsive-loss descent step on `x` and compares the new mean
/// norm with the closed-form bound. Reports; does not assert the bound.
pub fn mean_shift_bound_check(x: &RawEmbeddingSet, tau: f64, lr: f64) -> Result<BoundCheckResult> {
    check_tau(tau)?;
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::invalid("lr", format!("must be non-negative, got {lr}")));
    }
    let n = x.n_points();
    if n < 2 {
        return Err(Error::invalid("x", "the bound needs at least two points"));
    }
    let z0 = normalize(x)?;
    let (_, mu0_norm) = embedding_mean(&z0);
    let (sigma, _) = x.norm_range();
    let grad = repulsive_grad_raw(x, tau)?;
    let x1 = RawEmbeddingSet::new(x.data().add_scaled(&grad, -lr)?)?;
    let (_, lhs) = embedding_mean(&normalize(&x1)?);
    let n_neg = n - 1;
    let rhs = mean_shift_factor(tau, sigma, n_neg, lr) * mu0_norm;
    let p = prob_matrix(&z0, tau)?;
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for a in (i + 1)..n {
            asym = asym.max((p[(i, a)] - p[(a, i)]).abs());
        }
    }
    Ok(BoundCheckResult {
        lhs,
        rhs,
        satisfied: lhs <= rhs + 1e-12,
        mu0_norm,
        max_p_asymmetry: asym,
        tau,
        lr,
        sigma,
        n_neg,
        n_points: n,
        dim: x.dim(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSurvey {
    pub configs: Vec<BoundCheckResult>,
    pub satisfied: usize,
    pub satisfaction_rate: f64,
    pub max_p_asymmetry: f64,
}

const SURVEY_TAUS: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];

/// Bound check over `count` random configurations. Configuration `i` is drawn
/// from its own stream derived from `(seed, i)`, so results do not depend on
/// scheduling.
pub fn bound_survey(count: usize, seed: u64) -> Result<BoundSurvey> {
    let configs = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut s = Stream::derive(seed, i as u64);
            let n = s.int_inclusive(2, 16);
            let m = s.int_inclusive(2, 8);
            let tau = SURVEY_TAUS[s.int_inclusive(0, SURVEY_TAUS.len() - 1)];
            let scale = 0.5 + 1.5 * s.uniform();
            let lr = 0.5 * tau * (6.0 * s.uniform() - 3.0).exp();
            let x = random_raw(n, m, s.int_inclusive(0, usize::MAX >> 1) as u64, scale)?;
            mean_shift_bound_check(&x, tau, lr)
        })
        .collect::<Result<Vec<_>>>()?;
    let satisfied = configs.iter().filter(|c| c.satisfied).count();
    let max_p_asymmetry = configs.iter().map(|c| c.max_p_asymmetry).fold(0.0, f64::max);
    Ok(BoundSurvey {
        satisfaction_rate: if count == 0 { 1.0 } else { satisfied as f64 / count as f64 },
        satisfied,
        max_p_asymmetry,
        configs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use nalgebra::{DMatrix, SymmetricEigen};

    fn eig_oracle_sq(m: &Matrix) -> Vec<f64> {
        let a = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
        let ata = a.transpose() * &a;
        let mut e: Vec<f64> = SymmetricEigen::new(ata).eigenvalues.iter().copied().collect();
        e.sort_by(|a, b| b.total_cmp(a));
        e.truncate(m.rows().min(m.cols()));
        e
    }

    #[test]
    fn spectrum_identity_and_duplicate_rows() {
        assert_eq!(singular_spectrum(&Matrix::identity(3)).unwrap(), vec![1.0, 1.0, 1.0]);
        let s = singular_spectrum(&Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap()).unwrap();
        assert!((s[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!(s[1].abs() < 1e-15);
    }

    #[test]
    fn spectrum_matches_eigen_oracle() {
        let m = Stream::new(8).gaussian_matrix(8, 5, 1.0);
        let s = singular_spectrum(&m).unwrap();
        let e = eig_oracle_sq(&m);
        for (sv, ev) in s.iter().zip(&e) {
            assert!((sv * sv - ev).abs() <= 1e-8 * ev.abs());
        }
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&[1.0, 5e-4, 1e-6], 1e-3), 1);
        assert_eq!(effective_rank(&[1.0, 1.0, 1.0], 1e-3), 3);
        assert_eq!(effective_rank(&[0.0, 0.0], 1e-3), 0);
        let equal_rows = Matrix::from_rows(&[[0.3, 0.4, 0.5]; 6]).unwrap();
        assert_eq!(effective_rank(&singular_spectrum(&equal_rows).unwrap(), 1e-3), 1);
    }

    #[test]
    fn effective_rank_of_rank_deficient_products() {
        let mut s = Stream::new(2);
        for r in 1..5 {
            let a = s.gaussian_matrix(9, r, 1.0);
            let b = s.gaussian_matrix(r, 6, 1.0);
            let m = a.matmul(&b).unwrap();
            assert_eq!(effective_rank(&singular_spectrum(&m).unwrap(), 1e-3), r);
        }
    }

    #[test]
    fn spectrum_invariant_under_rotation() {
        let m = Stream::new(3).gaussian_matrix(7, 4, 1.0);
        let q = crate::prototypes::generate_orthonormal(4, 4, 5).unwrap().vectors().clone();
        let a = singular_spectrum(&m).unwrap();
        let b = singular_spectrum(&m.matmul(&q).unwrap()).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn pca_of_points_on_a_line() {
        let m = Matrix::from_fn(6, 3, |i, j| (i as f64 - 1.5) * [1.0, -2.0, 0.5][j] + 4.0);
        let p = pca2(&m).unwrap();
        assert!(p.column(1).iter().all(|v| v.abs() < 1e-9));
        assert!(p.column_means().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn pca_matches_covariance_eigenvectors() {
        let m = Stream::new(10).gaussian_matrix(20, 4, 1.0);
        let p = pca2(&m).unwrap();
        let mean = m.column_means();
        let c = Matrix::from_fn(20, 4, |i, j| m[(i, j)] - mean[j]);
        let cm = DMatrix::from_row_slice(20, 4, c.as_slice());
        let eig = SymmetricEigen::new(cm.transpose() * &cm);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (col, &idx) in order.iter().take(2).enumerate() {
            let v = eig.eigenvectors.column(idx);
            let proj: Vec<f64> = (0..20).map(|i| (0..4).map(|j| c[(i, j)] * v[j]).sum()).collect();
            // equal up to sign
            let same = proj.iter().zip(p.column(col)).all(|(a, b)| (a - b).abs() < 1e-8);
            let flip = proj.iter().zip(p.column(col)).all(|(a, b)| (a + b).abs() < 1e-8);
            assert!(same || flip, "component {col}");
        }
        let var = |j: usize| p.column(j).iter().map(|v| v * v).sum::<f64>();
        assert!(var(0) >= var(1));
    }

    #[test]
    fn embedding_mean_examples() {
        let anti = UnitEmbeddingSet::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(embedding_mean(&anti), (vec![0.0, 0.0], 0.0));
        let same = UnitEmbeddingSet::from_rows(&[[0.6, 0.8]; 3]).unwrap();
        let (mu, n) = embedding_mean(&same);
        assert!((mu[0] - 0.6).abs() < 1e-15 && (n - 1.0).abs() < 1e-15);
        let three = UnitEmbeddingSet::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let (mu, n) = embedding_mean(&three);
        assert!((mu[0] - 1.0 / 3.0).abs() < 1e-15 && mu[1].abs() < 1e-15);
        assert!((n - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn lr_window_examples() {
        let w = lr_window(0.1, 1.0, 49).unwrap();
        assert!((w.eta_lo - 0.0244898).abs() < 1e-6);
        assert!((w.eta_hi - 0.0755102).abs() < 1e-6);
        assert_eq!(w.midpoint, 0.05);
        let one = lr_window(0.1, 1.0, 1).unwrap();
        assert_eq!(one.eta_lo, 0.0);
        assert!((one.eta_hi - 0.1).abs() < 1e-15);
        assert!(lr_window(0.1, 0.0, 3).is_err());
        assert!(lr_window(0.1, 1.0, 0).is_err());
    }

    #[test]
    fn lr_window_widens_with_sigma_and_fewer_negatives() {
        let base = lr_window(0.2, 0.5, 10).unwrap();
        let wider_sigma = lr_window(0.2, 0.7, 10).unwrap();
        let fewer = lr_window(0.2, 0.5, 3).unwrap();
        for w in [wider_sigma, fewer] {
            assert!(w.half_width() > base.half_width());
            assert!((w.midpoint - base.midpoint).abs() < 1e-15);
        }
    }

    #[test]
    fn stationarity_examples() {
        let x = RawEmbeddingSet::from_rows(&[[0.5, -1.0, 2.0]; 4]).unwrap();
        let (ok, g) = stationarity_check(&x, &PairMap::adjacent(4).unwrap(), 0.1, 1e-10).unwrap();
        assert!(ok && g <= 1e-10);
        let (ok, _) = stationarity_check(&x, &PairMap::merged(4), 0.1, 1e-10).unwrap();
        assert!(ok);
        let generic = random_raw(6, 4, 1, 1.0).unwrap();
        let (ok, g) = stationarity_check(&generic, &PairMap::adjacent(6).unwrap(), 0.1, 1e-6).unwrap();
        assert!(!ok && g > 1e-6);
    }

    #[test]
    fn bound_rhs_vanishes_at_half_tau() {
        let x = random_raw(5, 3, 4, 1.0).unwrap();
        let r = mean_shift_bound_check(&x, 0.2, 0.1).unwrap();
        assert_eq!(r.rhs, 0.0);
    }

    #[test]
    fn bound_rhs_hand_case() {
        // σ = 1, |𝒩| = 1, μ₀ = (½, ½)
        let x = RawEmbeddingSet::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap();
        let r = mean_shift_bound_check(&x, 1.0, 0.1).unwrap();
        let expected = 0.8 * 2.0 * 0.5 * (0.5f64).sqrt();
        assert!((r.rhs - expected).abs() < 1e-12);
        // N = 2 gives a symmetric P
        assert!(r.max_p_asymmetry < 1e-15);
    }

    #[test]
    fn survey_is_deterministic() {
        let a = bound_survey(40, 3).unwrap();
        let b = bound_survey(40, 3).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.satisfaction_rate));
    }
}

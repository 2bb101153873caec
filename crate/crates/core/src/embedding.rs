//! Embedding containers, row normalization and the normalization pullback.
//!
//! Rows carry embeddings. A [`RawEmbeddingSet`] holds the unnormalized
//! vectors `x_i` that gradient descent updates; a [`UnitEmbeddingSet`] holds
//! `z_i = x_i / ‖x_i‖`, the vectors every loss consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::rng::Stream;

/// Rows with a norm below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEmbeddingSet(Matrix);

impl RawEmbeddingSet {
    pub fn new(data: Matrix) -> Result<Self> {
        if !data.is_finite() {
            return Err(Error::invalid("data", "embedding entries must be finite"));
        }
        Ok(Self(data))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn data(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn n_points(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.0.iter_rows().map(norm).collect()
    }

    /// Smallest and largest row norm; `(0, 0)` for an empty set.
    pub fn norm_range(&self) -> (f64, f64) {
        let norms = self.row_norms();
        if norms.is_empty() {
            return (0.0, 0.0);
        }
        norms
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &n| (lo.min(n), hi.max(n)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEmbeddingSet(Matrix);

impl UnitEmbeddingSet {
    /// Wraps rows that are already unit norm (checked to 1e-9).
    pub fn new(data: Matrix) -> Result<Self> {
        for (i, r) in data.iter_rows().enumerate() {
            let n = norm(r);
            if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(
                    "data",
                    format!("row {i} has norm {n}, expected 1"),
                ));
            }
        }
        Ok(Self(data))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn data(&self) -> &Matrix {
        &self.0
    }

    pub fn n_points(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// Reinterprets the unit rows as raw embeddings.
    pub fn to_raw(&self) -> RawEmbeddingSet {
        RawEmbeddingSet(self.0.clone())
    }
}

/// Positive-pair structure of a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairMap {
    /// `partner[i]` is the positive of `i`; an involution without fixed points.
    Paired(Vec<usize>),
    /// Each point is its own (already merged) positive; every other point is a negative.
    Merged(usize),
}

impl PairMap {
    pub fn paired(partner: Vec<usize>) -> Result<Self> {
        let n = partner.len();
        for (i, &j) in partner.iter().enumerate() {
            if j >= n {
                return Err(Error::BadPairMap(format!("partner {j} of {i} out of range")));
            }
            if j == i {
                return Err(Error::BadPairMap(format!("point {i} is its own partner")));
            }
            if partner[j] != i {
                return Err(Error::BadPairMap(format!(
                    "partner of {i} is {j} but partner of {j} is {}",
                    partner[j]
                )));
            }
        }
        Ok(PairMap::Paired(partner))
    }

    /// Pairs `(0,1), (2,3), ...`; `n` must be even.
    pub fn adjacent(n: usize) -> Result<Self> {
        if n % 2 != 0 {
            return Err(Error::BadPairMap(format!("paired mode needs an even count, got {n}")));
        }
        Ok(PairMap::Paired((0..n).map(|i| i ^ 1).collect()))
    }

    pub fn merged(n: usize) -> Self {
        PairMap::Merged(n)
    }

    pub fn len(&self) -> usize {
        match self {
            PairMap::Paired(p) => p.len(),
            PairMap::Merged(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positive partner of `i` (itself in merged mode).
    pub fn partner(&self, i: usize) -> usize {
        match self {
            PairMap::Paired(p) => p[i],
            PairMap::Merged(_) => i,
        }
    }

    pub(crate) fn check_len(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(Error::BadPairMap(format!(
                "pair map covers {} points, batch has {n}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Row-normalizes `x`; fails on the first row whose norm is below [`ZERO_NORM`].
pub fn normalize(x: &RawEmbeddingSet) -> Result<UnitEmbeddingSet> {
    let mut out = x.0.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let n = norm(r);
        if !(n >= ZERO_NORM) {
            return Err(Error::ZeroNormRow(i));
        }
        r.iter_mut().for_each(|v| *v /= n);
    }
    Ok(UnitEmbeddingSet(out))
}

/// Maps a gradient `g` taken with respect to `z = x/‖x‖` back to `x`:
/// `(1/‖x‖)(I − x xᵀ/‖x‖²) g`.
pub fn normalization_pullback(x: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if x.len() != g.len() {
        return Err(Error::shape(format!("length {}", x.len()), format!("length {}", g.len())));
    }
    let n = norm(x);
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroNormRow(0));
    }
    Ok(pullback_with_norm(x, n, g))
}

pub(crate) fn pullback_with_norm(x: &[f64], n: f64, g: &[f64]) -> Vec<f64> {
    let radial = dot(x, g) / (n * n);
    x.iter().zip(g).map(|(&xi, &gi)| (gi - radial * xi) / n).collect()
}

/// Applies the pullback row by row; `grad_z` is the gradient with respect to the unit rows.
pub fn pullback_rows(x: &RawEmbeddingSet, grad_z: &Matrix) -> Result<Matrix> {
    x.0.check_same_shape(grad_z)?;
    let mut out = Matrix::zeros(x.n_points(), x.dim());
    for i in 0..x.n_points() {
        let xi = x.row(i);
        let n = norm(xi);
        if !(n >= ZERO_NORM) {
            return Err(Error::ZeroNormRow(i));
        }
        out.row_mut(i).copy_from_slice(&pullback_with_norm(xi, n, grad_z.row(i)));
    }
    Ok(out)
}

/// `n × m` i.i.d. Gaussian entries with standard deviation `scale`.
pub fn random_raw(n: usize, m: usize, seed: u64, scale: f64) -> Result<RawEmbeddingSet> {
    if n == 0 || m == 0 {
        return Err(Error::invalid("n, m", "need at least one point and one dimension"));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::invalid("scale", "must be a finite non-negative number"));
    }
    RawEmbeddingSet::new(Stream::new(seed).gaussian_matrix(n, m, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four() {
        let x = RawEmbeddingSet::from_rows(&[[3.0, 4.0]]).unwrap();
        let z = normalize(&x).unwrap();
        assert!((z.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((z.row(0)[1] - 0.8).abs() < 1e-15);
        // input untouched
        assert_eq!(x.row(0), &[3.0, 4.0]);
    }

    #[test]
    fn normalize_unit_row_is_identity() {
        let x = RawEmbeddingSet::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(normalize(&x).unwrap().row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_row_errors() {
        let x = RawEmbeddingSet::from_rows(&[[1.0, 1.0], [0.0, 0.0]]).unwrap();
        assert_eq!(normalize(&x), Err(Error::ZeroNormRow(1)));
    }

    #[test]
    fn pullback_hand_case() {
        let v = normalization_pullback(&[2.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(v, vec![0.0, 0.5]);
    }

    #[test]
    fn pullback_kills_radial_direction() {
        let x = [0.3, -1.2, 2.0];
        for alpha in [-3.0, 0.5, 7.0] {
            let g: Vec<f64> = x.iter().map(|v| alpha * v).collect();
            let p = normalization_pullback(&x, &g).unwrap();
            assert!(p.iter().all(|v| v.abs() < 1e-14), "{p:?}");
        }
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let mut s = Stream::new(11);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| s.gaussian()).collect();
            let g: Vec<f64> = (0..5).map(|_| s.gaussian()).collect();
            let f = |v: &[f64]| {
                let n = norm(v);
                dot(g.as_slice(), &v.iter().map(|a| a / n).collect::<Vec<_>>())
            };
            let analytic = normalization_pullback(&x, &g).unwrap();
            let h = 1e-6;
            for k in 0..5 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                let rel = (fd - analytic[k]).abs() / analytic[k].abs().max(1e-8);
                assert!(rel <= 1e-5 || (fd - analytic[k]).abs() < 1e-9, "{fd} vs {}", analytic[k]);
            }
        }
    }

    #[test]
    fn random_raw_is_deterministic() {
        assert_eq!(random_raw(5, 3, 9, 1.0).unwrap(), random_raw(5, 3, 9, 1.0).unwrap());
        assert_ne!(random_raw(5, 3, 9, 1.0).unwrap(), random_raw(5, 3, 10, 1.0).unwrap());
    }

    #[test]
    fn random_raw_zero_scale() {
        let x = random_raw(4, 2, 1, 0.0).unwrap();
        assert!(x.data().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(normalize(&x), Err(Error::ZeroNormRow(0)));
    }

    #[test]
    fn pair_map_validation() {
        assert!(PairMap::paired(vec![1, 0, 3, 2]).is_ok());
        assert!(PairMap::paired(vec![0, 1]).is_err());
        assert!(PairMap::paired(vec![1, 2, 0]).is_err());
        assert!(PairMap::adjacent(5).is_err());
        assert_eq!(PairMap::merged(3).partner(2), 2);
    }

    fn nonzero_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..6)
            .prop_filter("rows need norm", |rows| rows.iter().all(|r| norm(r) > 1e-3))
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(rows in nonzero_rows()) {
            let z = normalize(&RawEmbeddingSet::from_rows(&rows).unwrap()).unwrap();
            let zz = normalize(&z.to_raw()).unwrap();
            for (a, b) in z.data().as_slice().iter().zip(zz.data().as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for r in z.data().iter_rows() {
                prop_assert!((norm(r) - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn pullback_is_orthogonal_and_linear(
            x in prop::collection::vec(-5.0f64..5.0, 3),
            g1 in prop::collection::vec(-5.0f64..5.0, 3),
            g2 in prop::collection::vec(-5.0f64..5.0, 3),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            prop_assume!(norm(&x) > 0.5);
            let p1 = normalization_pullback(&x, &g1).unwrap();
            let p2 = normalization_pullback(&x, &g2).unwrap();
            prop_assert!(dot(&p1, &x).abs() <= 1e-10 * norm(&g1).max(1e-300) * norm(&x));
            let comb: Vec<f64> = g1.iter().zip(&g2).map(|(u, v)| a * u + b * v).collect();
            let pc = normalization_pullback(&x, &comb).unwrap();
            for k in 0..3 {
                let lin = a * p1[k] + b * p2[k];
                prop_assert!((pc[k] - lin).abs() <= 1e-12 * lin.abs().max(1.0));
            }
        }
    }
}

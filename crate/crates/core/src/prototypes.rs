//! Fixed class prototypes in orthonormal, simplex-ETF and random geometry.
//!
//! Prototypes are generated once and never trained.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::jacobi_svd;
use crate::matrix::{norm, Matrix};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    #[default]
    Orthonormal,
    Etf,
    Random,
}

string_enum!(PrototypeMode { Orthonormal => "orthonormal", Etf => "etf", Random => "random" });

/// Unit prototype vectors, one row per class.
///
/// Serializes as `{"mode", "k", "dim", "seed", "vectors"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PrototypeFile", into = "PrototypeFile")]
pub struct PrototypeSet {
    vectors: Matrix,
    mode: PrototypeMode,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrototypeFile {
    mode: PrototypeMode,
    k: usize,
    dim: usize,
    seed: u64,
    vectors: Vec<Vec<f64>>,
}

impl From<PrototypeSet> for PrototypeFile {
    fn from(p: PrototypeSet) -> Self {
        PrototypeFile {
            mode: p.mode,
            k: p.k(),
            dim: p.dim(),
            seed: p.seed,
            vectors: p.vectors.to_rows(),
        }
    }
}

impl TryFrom<PrototypeFile> for PrototypeSet {
    type Error = String;

    fn try_from(f: PrototypeFile) -> std::result::Result<Self, String> {
        let vectors = Matrix::from_rows(&f.vectors).map_err(|e| e.to_string())?;
        if vectors.rows() != f.k || (f.k > 0 && vectors.cols() != f.dim) {
            return Err(format!(
                "declared {}x{} but vectors are {}x{}",
                f.k,
                f.dim,
                vectors.rows(),
                vectors.cols()
            ));
        }
        PrototypeSet::from_parts(vectors, f.mode, f.seed).map_err(|e| e.to_string())
    }
}

impl PrototypeSet {
    /// Wraps existing vectors, checking the unit-norm invariant (1e-9).
    pub fn from_parts(vectors: Matrix, mode: PrototypeMode, seed: u64) -> Result<Self> {
        for (i, r) in vectors.iter_rows().enumerate() {
            let n = norm(r);
            if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("vectors", format!("prototype {i} has norm {n}")));
            }
        }
        Ok(Self { vectors, mode, seed })
    }

    pub fn generate(mode: PrototypeMode, k: usize, dim: usize, seed: u64) -> Result<Self> {
        match mode {
            PrototypeMode::Orthonormal => generate_orthonormal(k, dim, seed),
            PrototypeMode::Etf => generate_etf(k, dim),
            PrototypeMode::Random => generate_random_unit(k, dim, seed),
        }
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn mode(&self) -> PrototypeMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn vector(&self, class: usize) -> &[f64] {
        self.vectors.row(class)
    }

    /// Rotates every prototype by `q` (`dim × dim`, applied as `c ↦ Q c`).
    pub fn rotated(&self, q: &Matrix) -> Result<Self> {
        let vectors = self.vectors.matmul(&q.transpose())?;
        Ok(Self {
            vectors,
            mode: self.mode,
            seed: self.seed,
        })
    }

    /// Largest `|cᵢ·cⱼ|` over `i ≠ j`, and the smallest/largest signed off-diagonal value.
    pub fn off_diagonal_stats(&self) -> OffDiagonal {
        let g = gram(self);
        let mut out = OffDiagonal {
            max_abs: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        };
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                if i != j {
                    out.max_abs = out.max_abs.max(g[(i, j)].abs());
                    out.min = out.min.min(g[(i, j)]);
                    out.max = out.max.max(g[(i, j)]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OffDiagonal {
    pub max_abs: f64,
    pub min: f64,
    pub max: f64,
}

/// Orthonormal prototypes: `k` Gaussian samples in `dim` dimensions,
/// replaced by the leading right-singular directions of the sample matrix.
/// Each row is sign-fixed so its first nonzero entry is positive.
pub fn generate_orthonormal(k: usize, dim: usize, seed: u64) -> Result<PrototypeSet> {
    if k == 0 || dim == 0 {
        return Err(Error::invalid("k", "need at least one class and one dimension"));
    }
    if k > dim {
        return Err(Error::TooManyClasses {
            classes: k,
            dim,
            limit: dim,
        });
    }
    let sample = Stream::new(seed).gaussian_matrix(k, dim, 1.0);
    let svd = jacobi_svd(&sample)?;
    let mut vectors = svd.right.transpose();
    for i in 0..k {
        let row = vectors.row_mut(i);
        let n = norm(row);
        row.iter_mut().for_each(|v| *v /= n);
        if let Some(&lead) = row.iter().find(|v| v.abs() > 1e-12) {
            if lead < 0.0 {
                row.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
    PrototypeSet::from_parts(vectors, PrototypeMode::Orthonormal, seed)
}

/// Simplex equiangular tight frame: `k` unit vectors with pairwise inner
/// product `−1/(k−1)`, requiring `2 ≤ k ≤ dim + 1`.
///
/// The centred simplex `√(k/(k−1))(I − 𝟙𝟙ᵀ/k)` lives in the `(k−1)`-dimensional
/// complement of `𝟙`; its coordinates in the Helmert basis of that complement
/// are written into the first `k−1` axes.
pub fn generate_etf(k: usize, dim: usize) -> Result<PrototypeSet> {
    if k < 2 {
        return Err(Error::invalid("k", "a simplex ETF needs at least two classes"));
    }
    if dim == 0 || k > dim + 1 {
        return Err(Error::TooManyClasses {
            classes: k,
            dim,
            limit: dim + 1,
        });
    }
    let kf = k as f64;
    let scale = (kf / (kf - 1.0)).sqrt();
    let simplex = Matrix::from_fn(k, k, |i, j| {
        let e = if i == j { 1.0 } else { 0.0 };
        scale * (e - 1.0 / kf)
    });
    // Helmert basis h_t (t = 1..k−1): t ones, then −t, then zeros, scaled to unit length.
    let helmert = Matrix::from_fn(k, k - 1, |i, t| {
        let t1 = (t + 1) as f64;
        let s = 1.0 / (t1 * (t1 + 1.0)).sqrt();
        if i <= t {
            s
        } else if i == t + 1 {
            -t1 * s
        } else {
            0.0
        }
    });
    let coords = simplex.matmul(&helmert)?;
    let mut vectors = Matrix::zeros(k, dim);
    for i in 0..k {
        let c = coords.row(i);
        let n = norm(c);
        for (t, v) in c.iter().enumerate() {
            vectors[(i, t)] = v / n;
        }
    }
    PrototypeSet::from_parts(vectors, PrototypeMode::Etf, 0)
}

/// `k` Gaussian vectors normalized to unit length, with no orthogonality.
pub fn generate_random_unit(k: usize, dim: usize, seed: u64) -> Result<PrototypeSet> {
    if k == 0 || dim == 0 {
        return Err(Error::invalid("k", "need at least one class and one dimension"));
    }
    let mut stream = Stream::new(seed);
    let mut vectors = Matrix::zeros(k, dim);
    for i in 0..k {
        // a Gaussian draw is zero with probability 0; redraw to be safe
        loop {
            let row: Vec<f64> = (0..dim).map(|_| stream.gaussian()).collect();
            let n = norm(&row);
            if n > 1e-12 {
                vectors
                    .row_mut(i)
                    .iter_mut()
                    .zip(&row)
                    .for_each(|(v, r)| *v = r / n);
                break;
            }
        }
    }
    PrototypeSet::from_parts(vectors, PrototypeMode::Random, seed)
}

/// `C·Cᵀ`.
pub fn gram(c: &PrototypeSet) -> Matrix {
    c.vectors.row_gram()
}

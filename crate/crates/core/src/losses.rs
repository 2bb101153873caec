//! Contrastive losses and their analytic gradients.
//!
//! Every loss is evaluated on unit embeddings. Gradients are first formed with
//! respect to the unit rows (`grad_z`) and then pulled back through the row
//! normalization to the raw embeddings, so they are exact gradients of
//! `loss ∘ normalize`.

use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, pullback_rows, PairMap, RawEmbeddingSet, UnitEmbeddingSet};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::prototypes::PrototypeSet;

/// Similarity `s(z, c)` used by the prototype-alignment penalty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    /// `s = z·c` on unit embeddings.
    #[default]
    Cosine,
    /// `s = 1 − ‖x − c‖²/2` on the raw (unnormalized) embedding `x`.
    NegSqEuclidean,
    /// `s = 1 − ‖z − c‖₁/2` on unit embeddings.
    NegL1,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 3] = [
        SimilarityKind::Cosine,
        SimilarityKind::NegSqEuclidean,
        SimilarityKind::NegL1,
    ];
}

string_enum!(SimilarityKind { Cosine => "cosine", NegSqEuclidean => "neg_sq_euclidean", NegL1 => "neg_l1" });

/// How the InfoNCE sum over anchors is reduced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}
string_enum!(Reduction { Sum => "sum", Mean => "mean" });

/// Optional class labels per point; labeled points form the supervised subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledBatch {
    labels: Vec<Option<usize>>,
}

impl LabeledBatch {
    pub fn new(labels: Vec<Option<usize>>, classes: usize) -> Result<Self> {
        for (index, l) in labels.iter().enumerate() {
            if let Some(label) = *l {
                if label >= classes {
                    return Err(Error::LabelOutOfRange {
                        index,
                        label,
                        classes,
                    });
                }
            }
        }
        Ok(Self { labels })
    }

    pub fn unlabeled(n: usize) -> Self {
        Self {
            labels: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// `(index, label)` for every labeled point.
    pub fn labeled(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|y| (i, y)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub infonce: f64,
    pub clop_penalty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// Gradient with respect to the raw embeddings.
    pub grad_raw: Matrix,
    pub components: LossComponents,
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid("tau", format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `(1/τ)(W + Wᵀ) Z`: the symmetric part of a row-stochastic weighting applied to the rows.
fn symmetric_pull(weights: &Matrix, z: &Matrix, tau: f64) -> Matrix {
    let n = z.rows();
    let mut g = Matrix::zeros(n, z.cols());
    for i in 0..n {
        let gi = g.row_mut(i);
        for a in 0..n {
            let w = weights[(i, a)] + weights[(a, i)];
            if w == 0.0 {
                continue;
            }
            for (gk, zk) in gi.iter_mut().zip(z.row(a)) {
                *gk += w * zk;
            }
        }
        gi.iter_mut().for_each(|v| *v /= tau);
    }
    g
}

/// InfoNCE value and its gradient with respect to the unit rows.
///
/// Paired mode: `−Σᵢ log[exp(zᵢ·z_{j(i)}/τ) / Σ_{a≠i} exp(zᵢ·z_a/τ)]`, the
/// positive appearing once in the denominator. Merged mode takes `j(i) = i`,
/// so the numerator is the constant `exp(1/τ)` and the denominator holds only
/// the other points.
pub(crate) fn infonce_value_grad_z(z: &Matrix, pairs: &PairMap, tau: f64) -> Result<(f64, Matrix)> {
    check_tau(tau)?;
    let n = z.rows();
    pairs.check_len(n)?;
    if n < 2 {
        return Err(Error::BadPairMap("InfoNCE needs at least two points".into()));
    }
    let sim = z.row_gram();
    // Q[i][a]: softmax over a ≠ i of zᵢ·z_a/τ
    let mut q = Matrix::zeros(n, n);
    let mut value = 0.0;
    for i in 0..n {
        let logits = (0..n).filter(|&a| a != i).map(|a| sim[(i, a)] / tau);
        let lse = log_sum_exp(logits);
        for a in (0..n).filter(|&a| a != i) {
            q[(i, a)] = (sim[(i, a)] / tau - lse).exp();
        }
        let positive = match pairs {
            PairMap::Paired(p) => sim[(i, p[i])] / tau,
            PairMap::Merged(_) => 1.0 / tau,
        };
        value += lse - positive;
    }
    let mut g = symmetric_pull(&q, z, tau);
    if let PairMap::Paired(p) = pairs {
        for i in 0..n {
            let zp = z.row(p[i]).to_vec();
            for (gk, zk) in g.row_mut(i).iter_mut().zip(zp) {
                *gk -= 2.0 * zk / tau;
            }
        }
    }
    Ok((value, g))
}

pub fn infonce_value(z: &UnitEmbeddingSet, pairs: &PairMap, tau: f64) -> Result<f64> {
    infonce_value_grad_z(z.data(), pairs, tau).map(|(v, _)| v)
}

/// Gradient of `infonce_value ∘ normalize` with respect to the raw rows.
pub fn infonce_grad_raw(x: &RawEmbeddingSet, pairs: &PairMap, tau: f64) -> Result<Matrix> {
    let z = normalize(x)?;
    let (_, gz) = infonce_value_grad_z(z.data(), pairs, tau)?;
    pullback_rows(x, &gz)
}

/// `P[i][a] = exp(zᵢ·z_a/τ) / Dᵢ` with `Dᵢ = exp(1/τ) + Σ_{a≠i} exp(zᵢ·z_a/τ)`.
/// The diagonal is zero. `P` is generally not symmetric.
pub fn prob_matrix(z: &UnitEmbeddingSet, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    Ok(prob_matrix_raw(z.data(), tau))
}

fn prob_matrix_raw(z: &Matrix, tau: f64) -> Matrix {
    let n = z.rows();
    let sim = z.row_gram();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        // scaled by exp(−1/τ) so the positive term becomes 1
        let mut denom = 1.0;
        for a in (0..n).filter(|&a| a != i) {
            let e = ((sim[(i, a)] - 1.0) / tau).exp();
            p[(i, a)] = e;
            denom += e;
        }
        p.row_mut(i).iter_mut().for_each(|v| *v /= denom);
    }
    p
}

pub(crate) fn repulsive_value_grad_z(z: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    check_tau(tau)?;
    let n = z.rows();
    let sim = z.row_gram();
    let mut value = 0.0;
    for i in 0..n {
        let s: f64 = (0..n)
            .filter(|&a| a != i)
            .map(|a| ((sim[(i, a)] - 1.0) / tau).exp())
            .sum();
        // log Dᵢ − 1/τ
        value += s.ln_1p();
    }
    let p = prob_matrix_raw(z, tau);
    Ok((value, symmetric_pull(&p, z, tau)))
}

/// Merged-pair repulsive loss `Σᵢ log Dᵢ − N/τ`.
pub fn repulsive_value(z: &UnitEmbeddingSet, tau: f64) -> Result<f64> {
    repulsive_value_grad_z(z.data(), tau).map(|(v, _)| v)
}

/// Gradient of `repulsive_value ∘ normalize`. In z-space row `i` is
/// `(1/τ) Σ_a (P_ia + P_ai) z_a`; the asymmetric part of `P` is kept.
pub fn repulsive_grad_raw(x: &RawEmbeddingSet, tau: f64) -> Result<Matrix> {
    let z = normalize(x)?;
    let (_, gz) = repulsive_value_grad_z(z.data(), tau)?;
    pullback_rows(x, &gz)
}

fn check_penalty_inputs(x: &RawEmbeddingSet, batch: &LabeledBatch, protos: &PrototypeSet) -> Result<()> {
    if batch.len() != x.n_points() {
        return Err(Error::shape(
            format!("{} labels", x.n_points()),
            format!("{} labels", batch.len()),
        ));
    }
    if protos.dim() != x.dim() {
        return Err(Error::shape(
            format!("prototype dim {}", x.dim()),
            format!("prototype dim {}", protos.dim()),
        ));
    }
    for (index, label) in batch.labeled() {
        if label >= protos.k() {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes: protos.k(),
            });
        }
    }
    Ok(())
}

/// Penalty value and its gradient before any normalization pullback.
///
/// The returned flag is true when the gradient is taken with respect to the
/// unit rows and still needs [`pullback_rows`]; the squared-Euclidean variant
/// is already a raw-space gradient.
pub(crate) fn clop_penalty_grad_unprojected(
    x: &RawEmbeddingSet,
    batch: &LabeledBatch,
    protos: &PrototypeSet,
    sim: SimilarityKind,
) -> Result<(f64, Matrix, bool)> {
    check_penalty_inputs(x, batch, protos)?;
    let (n, m) = (x.n_points(), x.dim());
    let count = batch.labeled_count();
    let mut grad = Matrix::zeros(n, m);
    let needs_pullback = sim != SimilarityKind::NegSqEuclidean;
    if count == 0 {
        return Ok((0.0, grad, needs_pullback));
    }
    let w = 1.0 / count as f64;
    let mut total = 0.0;
    if sim == SimilarityKind::NegSqEuclidean {
        for (i, y) in batch.labeled() {
            let c = protos.vector(y);
            let mut sq = 0.0;
            for ((g, &xk), &ck) in grad.row_mut(i).iter_mut().zip(x.row(i)).zip(c) {
                let d = xk - ck;
                sq += d * d;
                *g = w * d;
            }
            total += 0.5 * sq;
        }
        return Ok((total * w, grad, false));
    }
    let z = normalize(x)?;
    for (i, y) in batch.labeled() {
        let c = protos.vector(y);
        let zi = z.row(i);
        if sim == SimilarityKind::Cosine {
            total += 1.0 - dot(zi, c);
            for (g, &ck) in grad.row_mut(i).iter_mut().zip(c) {
                *g = -w * ck;
            }
        } else {
            let mut l1 = 0.0;
            for ((g, &zk), &ck) in grad.row_mut(i).iter_mut().zip(zi).zip(c) {
                let d = zk - ck;
                l1 += d.abs();
                *g = 0.5 * w * sign(d);
            }
            total += 0.5 * l1;
        }
    }
    Ok((total * w, grad, true))
}

/// Penalty `(1/|S|) Σ_{i∈S} (1 − s(zᵢ, c_{yᵢ}))` and its raw-space gradient.
pub(crate) fn clop_penalty_grad_raw(
    x: &RawEmbeddingSet,
    batch: &LabeledBatch,
    protos: &PrototypeSet,
    sim: SimilarityKind,
) -> Result<(f64, Matrix)> {
    let (v, g, needs_pullback) = clop_penalty_grad_unprojected(x, batch, protos, sim)?;
    if needs_pullback {
        Ok((v, pullback_rows(x, &g)?))
    } else {
        Ok((v, g))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Prototype-alignment penalty; 0 when nothing is labeled.
///
/// Takes raw embeddings because the squared-Euclidean variant is measured
/// before normalization. Unit rows can be passed via
/// [`UnitEmbeddingSet::to_raw`].
pub fn clop_penalty(
    x: &RawEmbeddingSet,
    batch: &LabeledBatch,
    protos: &PrototypeSet,
    sim: SimilarityKind,
) -> Result<f64> {
    clop_penalty_grad_raw(x, batch, protos, sim).map(|(v, _)| v)
}

/// InfoNCE plus `λ` times the prototype penalty, with the combined raw gradient.
#[allow(clippy::too_many_arguments)]
pub fn clop_total(
    x: &RawEmbeddingSet,
    pairs: &PairMap,
    batch: &LabeledBatch,
    protos: &PrototypeSet,
    tau: f64,
    lambda: f64,
    sim: SimilarityKind,
) -> Result<LossReport> {
    clop_total_with(x, pairs, batch, protos, tau, lambda, sim, Reduction::Sum)
}

/// As [`clop_total`], with a choice of InfoNCE reduction over anchors.
#[allow(clippy::too_many_arguments)]
pub fn clop_total_with(
    x: &RawEmbeddingSet,
    pairs: &PairMap,
    batch: &LabeledBatch,
    protos: &PrototypeSet,
    tau: f64,
    lambda: f64,
    sim: SimilarityKind,
    reduction: Reduction,
) -> Result<LossReport> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid("lambda", format!("must be non-negative, got {lambda}")));
    }
    let z = normalize(x)?;
    let (mut infonce, mut gz) = infonce_value_grad_z(z.data(), pairs, tau)?;
    if reduction == Reduction::Mean {
        let inv = 1.0 / x.n_points() as f64;
        infonce *= inv;
        gz = gz.scaled(inv);
    }
    let mut grad_raw = pullback_rows(x, &gz)?;
    let (penalty, gp) = clop_penalty_grad_raw(x, batch, protos, sim)?;
    if lambda != 0.0 {
        grad_raw = grad_raw.add_scaled(&gp, lambda)?;
    }
    Ok(LossReport {
        value: infonce + lambda * penalty,
        grad_raw,
        components: LossComponents {
            infonce,
            clop_penalty: penalty,
        },
    })
}

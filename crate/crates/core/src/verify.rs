//! Self-check suites: finite-difference gradient checks, stationary
//! constructions, the mean-shift bound survey and prototype geometry.

use serde::Serialize;
use serde_json::{json, Value};

use crate::diagnostics::{bound_survey, mean_shift_bound_check, stationarity_check};
use crate::embedding::{normalize, PairMap, RawEmbeddingSet};
use crate::error::{Error, Result};
use crate::losses::{
    clop_total, infonce_grad_raw, infonce_value, repulsive_grad_raw, repulsive_value, LabeledBatch, SimilarityKind,
};
use crate::matrix::Matrix;
use crate::prototypes::{generate_etf, generate_orthonormal, PrototypeMode, PrototypeSet};
use crate::rng::Stream;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;
/// Minimum `|z_k − c_k|` for labeled rows in gradient instances, keeping the
/// difference stencil away from the L1 kink.
pub const KINK_CLEARANCE: f64 = 1e-3;
pub const STATIONARY_TOL: f64 = 1e-10;
pub const GENERIC_MIN_GRAD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Stationarity,
    Bound,
    Prototypes,
}
string_enum!(Suite { Gradients => "gradients", Stationarity => "stationarity", Bound => "bound", Prototypes => "prototypes" });

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: usize,
    pub passed: usize,
    pub failed: usize,
    pub details: Value,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }

    fn new(suite: Suite, outcomes: &[bool], details: Value) -> Self {
        let passed = outcomes.iter().filter(|&&ok| ok).count();
        Self {
            suite: suite.to_string(),
            checks: outcomes.len(),
            passed,
            failed: outcomes.len() - passed,
            details,
        }
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    match suite {
        Suite::Gradients => gradients(100, seed),
        Suite::Stationarity => stationarity(seed),
        Suite::Bound => bound(seed),
        Suite::Prototypes => prototypes(seed),
    }
}

/// Central differences of `f` at every raw entry.
pub fn finite_difference(x: &RawEmbeddingSet, h: f64, f: impl Fn(&RawEmbeddingSet) -> Result<f64>) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.n_points(), x.dim());
    for i in 0..x.n_points() {
        for k in 0..x.dim() {
            let mut p = x.data().clone();
            let mut q = x.data().clone();
            p[(i, k)] += h;
            q[(i, k)] -= h;
            out[(i, k)] = (f(&RawEmbeddingSet::new(p)?)? - f(&RawEmbeddingSet::new(q)?)?) / (2.0 * h);
        }
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` in the Frobenius norm.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.add_scaled(b, -1.0).map(|d| frobenius(&d)).unwrap_or(f64::INFINITY);
    let scale = frobenius(a).max(frobenius(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn frobenius(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn l1_kink_distance(x: &RawEmbeddingSet, batch: &LabeledBatch, protos: &PrototypeSet) -> Result<f64> {
    let z = normalize(x)?;
    Ok(batch
        .labeled()
        .flat_map(|(i, y)| {
            let c = protos.vector(y);
            z.row(i).iter().zip(c).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
        })
        .fold(f64::INFINITY, f64::min))
}

/// A random involution without fixed points on `0..n` (`n` even).
fn random_pairs(n: usize, st: &mut Stream) -> Result<PairMap> {
    let order = st.permutation(n);
    let mut partner = vec![0; n];
    for p in order.chunks(2) {
        partner[p[0]] = p[1];
        partner[p[1]] = p[0];
    }
    PairMap::paired(partner)
}

/// Gaussian directions with row norms drawn from `[0.5, 2]`.
fn random_config(n: usize, m: usize, st: &mut Stream) -> Result<RawEmbeddingSet> {
    let mut g = st.gaussian_matrix(n, m, 1.0);
    for i in 0..n {
        let r = 0.5 + 1.5 * st.uniform();
        let len = crate::matrix::norm(g.row(i));
        g.row_mut(i).iter_mut().for_each(|v| *v *= r / len);
    }
    RawEmbeddingSet::new(g)
}

const TAUS: [f64; 3] = [0.05, 0.1, 0.5];

fn gradients(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut outcomes = Vec::new();
    let mut worst = json!({});
    let mut worst_by = [0.0f64; 5];
    for t in 0..instances {
        let mut st = Stream::derive(seed, t as u64);
        let n = 2 * st.int_inclusive(2, 8);
        let m = st.int_inclusive(3, 8);
        let tau = TAUS[st.int_inclusive(0, 2)];
        let pairs = random_pairs(n, &mut st)?;
        let k = st.int_inclusive(2, m);
        let protos = generate_orthonormal(k, m, st.int_inclusive(0, 1 << 30) as u64)?;
        let labels = (0..n)
            .map(|_| (st.uniform() < 0.5).then(|| st.int_inclusive(0, k - 1)))
            .collect();
        let batch = LabeledBatch::new(labels, k)?;
        let x = loop {
            let x = random_config(n, m, &mut st)?;
            if l1_kink_distance(&x, &batch, &protos)? >= KINK_CLEARANCE {
                break x;
            }
        };
        let lambda = 0.5 + st.uniform();

        let mut errs = Vec::with_capacity(5);
        let g = infonce_grad_raw(&x, &pairs, tau)?;
        let fd = finite_difference(&x, FD_STEP, |y| infonce_value(&normalize(y)?, &pairs, tau))?;
        errs.push(relative_error(&g, &fd));
        let g = repulsive_grad_raw(&x, tau)?;
        let fd = finite_difference(&x, FD_STEP, |y| repulsive_value(&normalize(y)?, tau))?;
        errs.push(relative_error(&g, &fd));
        for sim in SimilarityKind::ALL {
            let g = clop_total(&x, &pairs, &batch, &protos, tau, lambda, sim)?.grad_raw;
            let fd = finite_difference(&x, FD_STEP, |y| Ok(clop_total(y, &pairs, &batch, &protos, tau, lambda, sim)?.value))?;
            errs.push(relative_error(&g, &fd));
        }
        errs.iter().zip(worst_by.iter_mut()).for_each(|(e, w)| *w = w.max(*e));
        outcomes.push(errs.iter().all(|&e| e <= FD_TOL));
    }
    if let Value::Object(map) = &mut worst {
        let names = ["infonce", "repulsive", "clop_cosine", "clop_neg_sq_euclidean", "clop_neg_l1"];
        for (name, w) in names.iter().zip(worst_by) {
            map.insert((*name).into(), json!(w));
        }
    }
    Ok(SuiteReport::new(
        Suite::Gradients,
        &outcomes,
        json!({ "step": FD_STEP, "tolerance": FD_TOL, "relative_error": worst }),
    ))
}

/// Rows `±rᵢ·u` for a shared direction `u`; all signs positive when `signed` is false.
pub fn collinear_config(n: usize, m: usize, signed: bool, st: &mut Stream) -> Result<RawEmbeddingSet> {
    let u = st.gaussian_matrix(1, m, 1.0);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let r = 0.5 + 1.5 * st.uniform();
            let s = if signed && st.uniform() < 0.5 { -1.0 } else { 1.0 };
            u.row(0).iter().map(|v| s * r * v).collect()
        })
        .collect();
    RawEmbeddingSet::from_rows(&rows)
}

fn stationarity(seed: u64) -> Result<SuiteReport> {
    let mut outcomes = Vec::new();
    let mut worst_stationary: f64 = 0.0;
    let mut weakest_generic = f64::INFINITY;
    for t in 0..150u64 {
        let mut st = Stream::derive(seed, t);
        let n = 2 * st.int_inclusive(2, 8);
        let m = st.int_inclusive(2, 8);
        let tau = TAUS[st.int_inclusive(0, 2)];
        let pairs = if t % 2 == 0 { random_pairs(n, &mut st)? } else { PairMap::merged(n) };
        if t < 100 {
            let x = collinear_config(n, m, t % 3 != 0, &mut st)?;
            let (ok, inf) = stationarity_check(&x, &pairs, tau, STATIONARY_TOL)?;
            worst_stationary = worst_stationary.max(inf);
            outcomes.push(ok);
        } else {
            let x = random_config(n, m, &mut st)?;
            let (_, inf) = stationarity_check(&x, &pairs, tau, STATIONARY_TOL)?;
            weakest_generic = weakest_generic.min(inf);
            outcomes.push(inf > GENERIC_MIN_GRAD);
        }
    }
    Ok(SuiteReport::new(
        Suite::Stationarity,
        &outcomes,
        json!({
            "constructed": 100,
            "generic": 50,
            "max_constructed_grad_inf": worst_stationary,
            "min_generic_grad_inf": weakest_generic,
        }),
    ))
}

fn bound(seed: u64) -> Result<SuiteReport> {
    let survey = bound_survey(1000, seed)?;
    // the closed-form factor vanishes at the window midpoint
    let mut st = Stream::derive(seed, 0xB0);
    let mut outcomes = Vec::new();
    for _ in 0..10 {
        let tau = TAUS[st.int_inclusive(0, 2)];
        let x = random_config(st.int_inclusive(2, 8), st.int_inclusive(2, 6), &mut st)?;
        outcomes.push(mean_shift_bound_check(&x, tau, tau / 2.0)?.rhs == 0.0);
    }
    outcomes.push((0.0..=1.0).contains(&survey.satisfaction_rate));
    Ok(SuiteReport::new(
        Suite::Bound,
        &outcomes,
        json!({
            "configs": survey.configs.len(),
            "satisfied": survey.satisfied,
            "satisfaction_rate": survey.satisfaction_rate,
            "max_p_asymmetry": survey.max_p_asymmetry,
        }),
    ))
}

fn prototypes(seed: u64) -> Result<SuiteReport> {
    let mut outcomes = Vec::new();
    let ortho = generate_orthonormal(100, 128, seed)?;
    let ortho_dev = identity_deviation(&ortho);
    outcomes.push(ortho_dev <= 1e-9);
    let mut etf_dev: f64 = 0.0;
    for k in [2, 3, 10] {
        let etf = generate_etf(k, 16)?;
        let target = -1.0 / (k as f64 - 1.0);
        let s = etf.off_diagonal_stats();
        let dev = (s.min - target).abs().max((s.max - target).abs());
        etf_dev = etf_dev.max(dev);
        outcomes.push(dev <= 1e-9);
    }
    for mode in [PrototypeMode::Orthonormal, PrototypeMode::Etf, PrototypeMode::Random] {
        let first = PrototypeSet::generate(mode, 10, 16, seed)?;
        let same = (0..20).all(|_| PrototypeSet::generate(mode, 10, 16, seed).is_ok_and(|p| p == first));
        outcomes.push(same);
    }
    outcomes.push(matches!(generate_orthonormal(129, 128, seed), Err(Error::TooManyClasses { .. })));
    Ok(SuiteReport::new(
        Suite::Prototypes,
        &outcomes,
        json!({ "orthonormal_identity_deviation": ortho_dev, "etf_max_deviation": etf_dev }),
    ))
}

/// `max |CCᵀ − I|`.
pub fn identity_deviation(c: &PrototypeSet) -> f64 {
    let g = crate::prototypes::gram(c);
    let mut dev: f64 = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let e = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((g[(i, j)] - e).abs());
        }
    }
    dev
}

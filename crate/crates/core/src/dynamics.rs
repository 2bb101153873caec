//! Full-batch gradient descent over a set of embeddings, with trajectory
//! recording of the loss, the embedding-mean norm, raw norms and the singular
//! spectrum.
//!
//! Two descent geometries are available:
//!
//! * [`DescentMode::Pullback`] keeps raw embeddings `X` and steps along the
//!   exact raw-space gradient (normalization happens inside the loss).
//! * [`DescentMode::Sphere`] keeps unit embeddings `Z`, steps along the
//!   Euclidean gradient with respect to `Z` and renormalizes each row.
//!
//! With merged pairs (`j(i) = i`) and sphere descent at `τ = 0.1`, `N = m = 50`,
//! a learning rate of 1 drives the embeddings into a one-dimensional subspace
//! while 0.01 and 0.1 keep the spectrum spread out. Pullback descent with the
//! same losses stays spread at every one of those rates: its step shrinks as the
//! raw norms grow, so it cannot overshoot through the origin.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{effective_rank, embedding_mean, pca2, singular_spectrum, EFFECTIVE_RANK_EPS};
use crate::embedding::{normalize, pullback_rows, random_raw, PairMap, RawEmbeddingSet};
use crate::error::{Error, Result};
use crate::losses::{
    clop_penalty_grad_unprojected, infonce_value_grad_z, repulsive_value_grad_z, LabeledBatch,
    SimilarityKind,
};
use crate::matrix::Matrix;
use crate::prototypes::{PrototypeMode, PrototypeSet};
use crate::rng::{mix, Stream};

/// Raw norms below this abort a run.
pub const DIVERGENCE_NORM: f64 = 1e-12;


#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Paired,
    #[default]
    Merged,
}
string_enum!(PairMode { Paired => "paired", Merged => "merged" });

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Infonce,
    Repulsive,
    Clop,
}
string_enum!(LossKind { Infonce => "infonce", Repulsive => "repulsive", Clop => "clop" });

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescentMode {
    Pullback,
    #[default]
    Sphere,
}
string_enum!(DescentMode { Pullback => "pullback", Sphere => "sphere" });


/// Prototype-alignment settings used when `loss = clop`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClopParams {
    pub lambda: f64,
    pub prototype_mode: PrototypeMode,
    pub label_fraction: f64,
    pub classes: usize,
    pub similarity: SimilarityKind,
}

impl Default for ClopParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            prototype_mode: PrototypeMode::Orthonormal,
            label_fraction: 0.1,
            classes: 10,
            similarity: SimilarityKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub n_points: usize,
    pub dim: usize,
    pub tau: f64,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub pair_mode: PairMode,
    pub loss: LossKind,
    pub descent: DescentMode,
    /// Standard deviation of the Gaussian initial raw entries.
    pub init_scale: f64,
    /// In paired mode, start each positive pair at a single shared point.
    pub coincident_pairs: bool,
    pub record_every: usize,
    pub clop: ClopParams,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_points: 50,
            dim: 50,
            tau: 0.1,
            lr: 0.01,
            steps: 1000,
            seed: 0,
            pair_mode: PairMode::Merged,
            loss: LossKind::Infonce,
            descent: DescentMode::Sphere,
            init_scale: 1.0,
            coincident_pairs: true,
            record_every: 10,
            clop: ClopParams::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::invalid("n_points", "must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid("tau", "must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr", "must be non-negative"));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::invalid("init_scale", "must be non-negative"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every", "must be at least 1"));
        }
        match self.pair_mode {
            PairMode::Paired if self.n_points % 2 != 0 => {
                return Err(Error::invalid(
                    "n_points",
                    format!("paired mode needs an even count, got {}", self.n_points),
                ));
            }
            PairMode::Paired if self.loss == LossKind::Repulsive => {
                return Err(Error::invalid("loss", "the repulsive loss assumes merged pairs"));
            }
            _ => {}
        }
        if self.loss != LossKind::Repulsive && self.n_points < 2 {
            return Err(Error::invalid("n_points", "InfoNCE needs at least two points"));
        }
        if self.loss == LossKind::Clop {
            let c = &self.clop;
            if !(c.lambda >= 0.0) || !c.lambda.is_finite() {
                return Err(Error::invalid("clop.lambda", "must be non-negative"));
            }
            if !(0.0..=1.0).contains(&c.label_fraction) {
                return Err(Error::invalid("clop.label_fraction", "must lie in [0, 1]"));
            }
            let limit = match c.prototype_mode {
                PrototypeMode::Orthonormal => self.dim,
                PrototypeMode::Etf => self.dim + 1,
                PrototypeMode::Random => usize::MAX,
            };
            let min = if c.prototype_mode == PrototypeMode::Etf { 2 } else { 1 };
            if c.classes < min || c.classes > limit {
                return Err(Error::invalid(
                    "clop.classes",
                    format!("{} classes do not fit {} prototypes in dimension {}", c.classes, c.prototype_mode, self.dim),
                ));
            }
        }
        Ok(())
    }

    fn pair_map(&self) -> Result<PairMap> {
        match self.pair_mode {
            PairMode::Paired => PairMap::adjacent(self.n_points),
            PairMode::Merged => Ok(PairMap::merged(self.n_points)),
        }
    }

    /// Point `i` belongs to group `i` (merged) or `i / 2` (paired).
    fn group(&self, i: usize) -> usize {
        match self.pair_mode {
            PairMode::Paired => i / 2,
            PairMode::Merged => i,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub loss: f64,
    pub mean_norm: f64,
    pub min_raw_norm: f64,
    pub max_raw_norm: f64,
    pub effective_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub spectrum: Vec<f64>,
    /// `N × 2` principal-component coordinates of the unit embeddings.
    pub pca: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub config: SimulationConfig,
    pub points: Vec<TrajectoryPoint>,
    pub snapshots: Vec<Snapshot>,
    pub final_embeddings: RawEmbeddingSet,
}

impl TrajectoryRecord {
    pub fn last(&self) -> &TrajectoryPoint {
        self.points.last().expect("a trajectory always holds the step-0 record")
    }

    /// Final effective rank at most 2.
    pub fn collapsed(&self) -> bool {
        self.last().effective_rank <= 2
    }
}

/// `X − lr · grad`.
pub fn step(x: &RawEmbeddingSet, grad: &Matrix, lr: f64) -> Result<RawEmbeddingSet> {
    RawEmbeddingSet::new(x.data().add_scaled(grad, -lr)?)
}

struct Objective {
    pairs: PairMap,
    supervision: Option<(LabeledBatch, PrototypeSet)>,
}

impl Objective {
    fn new(cfg: &SimulationConfig) -> Result<Self> {
        let pairs = cfg.pair_map()?;
        let supervision = if cfg.loss == LossKind::Clop {
            let c = &cfg.clop;
            let protos = PrototypeSet::generate(c.prototype_mode, c.classes, cfg.dim, mix(cfg.seed, 0xC10F))?;
            let groups = cfg.group(cfg.n_points - 1) + 1;
            let n_labeled = (c.label_fraction * groups as f64).round() as usize;
            let mut order = Stream::derive(cfg.seed, 0x1ABE1).permutation(groups);
            order.truncate(n_labeled);
            let mut is_labeled = vec![false; groups];
            order.into_iter().for_each(|g| is_labeled[g] = true);
            let labels = (0..cfg.n_points)
                .map(|i| {
                    let g = cfg.group(i);
                    is_labeled[g].then_some(g % c.classes)
                })
                .collect();
            Some((LabeledBatch::new(labels, c.classes)?, protos))
        } else {
            None
        };
        Ok(Self { pairs, supervision })
    }

    /// Loss value and descent direction for the configured geometry.
    fn evaluate(&self, cfg: &SimulationConfig, x: &RawEmbeddingSet) -> Result<(f64, Matrix)> {
        let z = normalize(x)?;
        let (mut value, mut gz) = match cfg.loss {
            LossKind::Repulsive => repulsive_value_grad_z(z.data(), cfg.tau)?,
            LossKind::Infonce | LossKind::Clop => infonce_value_grad_z(z.data(), &self.pairs, cfg.tau)?,
        };
        let mut raw_extra = None;
        if let Some((batch, protos)) = &self.supervision {
            let lambda = cfg.clop.lambda;
            let (p, g, on_unit) = clop_penalty_grad_unprojected(x, batch, protos, cfg.clop.similarity)?;
            value += lambda * p;
            if on_unit || cfg.descent == DescentMode::Sphere {
                gz = gz.add_scaled(&g, lambda)?;
            } else {
                raw_extra = Some(g.scaled(lambda));
            }
        }
        let dir = match cfg.descent {
            DescentMode::Sphere => gz,
            DescentMode::Pullback => {
                let g = pullback_rows(x, &gz)?;
                match raw_extra {
                    Some(extra) => g.add_scaled(&extra, 1.0)?,
                    None => g,
                }
            }
        };
        Ok((value, dir))
    }
}

fn initial_embeddings(cfg: &SimulationConfig) -> Result<RawEmbeddingSet> {
    if cfg.pair_mode == PairMode::Paired && cfg.coincident_pairs {
        let base = random_raw(cfg.n_points / 2, cfg.dim, cfg.seed, cfg.init_scale)?;
        let rows: Vec<&[f64]> = (0..cfg.n_points).map(|i| base.row(i / 2)).collect();
        RawEmbeddingSet::from_rows(&rows)
    } else {
        random_raw(cfg.n_points, cfg.dim, cfg.seed, cfg.init_scale)
    }
}

/// Runs the configured simulation from its seeded initial embeddings.
pub fn run_simulation(cfg: &SimulationConfig) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    simulate_from(cfg, initial_embeddings(cfg)?)
}

/// Runs the configured descent from caller-provided initial embeddings.
pub fn simulate_from(cfg: &SimulationConfig, x0: RawEmbeddingSet) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    if x0.n_points() != cfg.n_points || x0.dim() != cfg.dim {
        return Err(Error::shape(
            format!("{}x{}", cfg.n_points, cfg.dim),
            format!("{}x{}", x0.n_points(), x0.dim()),
        ));
    }
    let objective = Objective::new(cfg)?;
    let mut x = match cfg.descent {
        DescentMode::Sphere => normalize(&x0)?.to_raw(),
        DescentMode::Pullback => x0,
    };
    let mut points = Vec::new();
    let mut snapshots = Vec::new();
    for t in 0..=cfg.steps {
        let (value, dir) = objective.evaluate(cfg, &x)?;
        if !value.is_finite() || !dir.is_finite() {
            return Err(Error::NonFinite { step: t });
        }
        if t % cfg.record_every == 0 || t == cfg.steps {
            let z = normalize(&x)?;
            let spectrum = singular_spectrum(z.data())?;
            let (min_raw_norm, max_raw_norm) = x.norm_range();
            points.push(TrajectoryPoint {
                step: t,
                loss: value,
                mean_norm: embedding_mean(&z).1,
                min_raw_norm,
                max_raw_norm,
                effective_rank: effective_rank(&spectrum, EFFECTIVE_RANK_EPS),
            });
            let pca = if cfg.n_points >= 2 {
                pca2(z.data())?
            } else {
                Matrix::zeros(cfg.n_points, 2)
            };
            snapshots.push(Snapshot { step: t, spectrum, pca });
        }
        if t == cfg.steps {
            break;
        }
        let next = step(&x, &dir, cfg.lr)?;
        let (lo, _) = next.norm_range();
        if lo < DIVERGENCE_NORM {
            let norms = next.row_norms();
            let row = norms.iter().position(|&n| n == lo).unwrap_or(0);
            return Err(Error::DivergedToZero { step: t + 1, row, norm: lo });
        }
        x = match cfg.descent {
            DescentMode::Sphere => normalize(&next)?.to_raw(),
            DescentMode::Pullback => next,
        };
    }
    Ok(TrajectoryRecord {
        config: cfg.clone(),
        points,
        snapshots,
        final_embeddings: x,
    })
}

/// Runs every configuration independently (in parallel); results keep input order.
pub fn sweep(cfgs: &[SimulationConfig]) -> Vec<Result<TrajectoryRecord>> {
    cfgs.par_iter().map(run_simulation).collect()
}

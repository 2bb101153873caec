//! Small semi-supervised training loop: an affine (optionally tanh) encoder on
//! a synthetic Gaussian mixture, trained with InfoNCE or InfoNCE plus the
//! prototype penalty.

use serde::{Deserialize, Serialize};

use crate::diagnostics::{effective_rank, singular_spectrum, EFFECTIVE_RANK_EPS};
use crate::embedding::{normalize, PairMap, RawEmbeddingSet, UnitEmbeddingSet};
use crate::error::{Error, Result};
use crate::losses::{clop_total_with, LabeledBatch, Reduction, SimilarityKind};
use crate::matrix::{dot, Matrix};
use crate::prototypes::{PrototypeMode, PrototypeSet};
use crate::rng::{mix, Stream};

const SALT_MEANS: u64 = 0x4D45_414E;
const SALT_POINTS: u64 = 0x504F_494E;
const SALT_INIT: u64 = 0x494E_4954;
const SALT_PROTOS: u64 = 0x5052_4F54;
const SALT_LABELS: u64 = 0x4C41_4245;
const SALT_BATCHES: u64 = 0x4241_5443;
const SALT_VIEWS: u64 = 0x5649_4557;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub k: usize,
    pub d_in: usize,
    pub per_class: usize,
    pub spread: f64,
    pub within_std: f64,
    pub seed: u64,
}

/// Labeled points grouped by class; within each class the first three quarters
/// are training points and the rest are held out.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
    pub params: MixtureParams,
}

impl SyntheticDataset {
    pub fn k(&self) -> usize {
        self.params.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        idx.iter().for_each(|&i| data.extend_from_slice(self.inputs.row(i)));
        let u = Matrix::from_vec(idx.len(), d, data).expect("gathered rows have the input width");
        (u, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Class means are `spread · N(0, I)`, points are `mean + within_std · N(0, I)`.
pub fn gen_mixture(
    k: usize,
    d_in: usize,
    per_class: usize,
    spread: f64,
    within_std: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if k < 2 {
        return Err(Error::invalid("k", "a mixture needs at least two classes"));
    }
    if per_class < 4 {
        return Err(Error::invalid("per_class", "need at least four points per class"));
    }
    if d_in == 0 {
        return Err(Error::invalid("d_in", "must be at least 1"));
    }
    if !(spread >= 0.0 && within_std >= 0.0) || !spread.is_finite() || !within_std.is_finite() {
        return Err(Error::invalid("spread", "spread and within_std must be finite and non-negative"));
    }
    let means = Stream::derive(seed, SALT_MEANS).gaussian_matrix(k, d_in, spread);
    let mut noise = Stream::derive(seed, SALT_POINTS);
    let n_train = per_class * 3 / 4;
    let mut data = Vec::with_capacity(k * per_class * d_in);
    let mut labels = Vec::with_capacity(k * per_class);
    let mut split = Vec::with_capacity(k * per_class);
    for c in 0..k {
        for j in 0..per_class {
            data.extend(means.row(c).iter().map(|&m| m + within_std * noise.gaussian()));
            labels.push(c);
            split.push(if j < n_train { Split::Train } else { Split::Test });
        }
    }
    Ok(SyntheticDataset {
        inputs: Matrix::from_vec(k * per_class, d_in, data)?,
        labels,
        split,
        params: MixtureParams {
            k,
            d_in,
            per_class,
            spread,
            within_std,
            seed,
        },
    })
}

/// `x + jitter_std · N(0, I)`.
pub fn augment(x: &[f64], jitter_std: f64, stream: &mut Stream) -> Vec<f64> {
    if jitter_std == 0.0 {
        return x.to_vec();
    }
    x.iter().map(|&v| v + jitter_std * stream.gaussian()).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    None,
    Tanh,
}
string_enum!(Nonlinearity { None => "none", Tanh => "tanh" });

/// `x = act(W·u + b)`, embedded as `normalize(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub nonlinearity: Nonlinearity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Encoder {
    pub fn new(weights: Matrix, bias: Vec<f64>, nonlinearity: Nonlinearity) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape(format!("bias of length {}", weights.rows()), bias.len().to_string()));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("encoder", "parameters must be finite"));
        }
        Ok(Self {
            weights,
            bias,
            nonlinearity,
        })
    }

    /// Gaussian weights with variance `1/d_in`, zero bias.
    pub fn init(d_in: usize, dim: usize, nonlinearity: Nonlinearity, seed: u64) -> Self {
        let scale = 1.0 / (d_in.max(1) as f64).sqrt();
        Self {
            weights: Stream::new(seed).gaussian_matrix(dim, d_in, scale),
            bias: vec![0.0; dim],
            nonlinearity,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    fn check_input(&self, u: &Matrix) -> Result<()> {
        if u.cols() != self.d_in() {
            return Err(Error::shape(format!("{} input columns", self.d_in()), u.cols().to_string()));
        }
        Ok(())
    }

    /// Rows of `act(U·Wᵀ + b)`.
    pub fn forward_raw(&self, u: &Matrix) -> Result<RawEmbeddingSet> {
        self.check_input(u)?;
        let mut x = u.matmul(&self.weights.transpose())?;
        for i in 0..x.rows() {
            for (v, b) in x.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
                if self.nonlinearity == Nonlinearity::Tanh {
                    *v = v.tanh();
                }
            }
        }
        RawEmbeddingSet::new(x)
    }

    pub fn encode(&self, u: &Matrix) -> Result<UnitEmbeddingSet> {
        normalize(&self.forward_raw(u)?)
    }

    /// Parameter gradients of a scalar loss given its gradient with respect to
    /// the raw outputs `X = forward_raw(U)`.
    pub fn backward(&self, u: &Matrix, grad_raw: &Matrix) -> Result<EncoderGrads> {
        self.check_input(u)?;
        if grad_raw.shape() != (u.rows(), self.dim()) {
            return Err(Error::shape(
                format!("{}x{}", u.rows(), self.dim()),
                format!("{}x{}", grad_raw.rows(), grad_raw.cols()),
            ));
        }
        let delta = match self.nonlinearity {
            Nonlinearity::None => grad_raw.clone(),
            Nonlinearity::Tanh => {
                let h = self.forward_raw(u)?.into_matrix();
                Matrix::from_fn(h.rows(), h.cols(), |i, j| grad_raw[(i, j)] * (1.0 - h[(i, j)] * h[(i, j)]))
            }
        };
        let weights = delta.transpose().matmul(u)?;
        let bias = delta.column_means().into_iter().map(|m| m * delta.rows() as f64).collect();
        Ok(EncoderGrads { weights, bias })
    }

    pub fn apply(&mut self, grads: &EncoderGrads, lr: f64) -> Result<()> {
        self.weights = self.weights.add_scaled(&grads.weights, -lr)?;
        self.bias.iter_mut().zip(&grads.bias).for_each(|(b, g)| *b -= lr * g);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyLoss {
    Infonce,
    #[default]
    Clop,
}
string_enum!(ToyLoss { Infonce => "infonce", Clop => "clop" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: ToyLoss,
    pub classes: usize,
    pub d_in: usize,
    pub embed_dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub within_std: f64,
    pub label_fraction: f64,
    pub lambda: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Standard deviation of the Gaussian jitter that produces each view.
    pub jitter_std: f64,
    pub seed: u64,
    pub prototype_mode: PrototypeMode,
    pub similarity: SimilarityKind,
    pub nonlinearity: Nonlinearity,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: ToyLoss::Clop,
            classes: 8,
            d_in: 32,
            embed_dim: 16,
            per_class: 64,
            spread: 5.0,
            within_std: 1.0,
            label_fraction: 0.1,
            lambda: 1.0,
            tau: 0.1,
            lr: 0.05,
            batch_size: 64,
            epochs: 200,
            jitter_std: 1.0,
            seed: 0,
            prototype_mode: PrototypeMode::Orthonormal,
            similarity: SimilarityKind::Cosine,
            nonlinearity: Nonlinearity::None,
            probe_epochs: 100,
            probe_lr: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return Err(Error::invalid("label_fraction", "must lie in [0, 1]"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda", "must be non-negative"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid("tau", "must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr", "must be non-negative"));
        }
        if !(self.jitter_std >= 0.0) || !self.jitter_std.is_finite() {
            return Err(Error::invalid("jitter_std", "must be non-negative"));
        }
        if !(self.probe_lr >= 0.0) || !self.probe_lr.is_finite() {
            return Err(Error::invalid("probe_lr", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim", "must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("classes", "need at least two classes"));
        }
        if self.per_class < 4 {
            return Err(Error::invalid("per_class", "need at least four points per class"));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<SyntheticDataset> {
        gen_mixture(self.classes, self.d_in, self.per_class, self.spread, self.within_std, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub eff_rank: usize,
    pub np_acc: f64,
    pub probe_acc: f64,
    pub mean_proto_cos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub labeled: Vec<usize>,
    /// Epoch 0 is the untrained encoder.
    pub epochs: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().expect("a report always holds epoch 0")
    }
}

/// Training indices that receive labels: one per class first, the remainder
/// drawn uniformly from the rest.
fn choose_labeled(data: &SyntheticDataset, train: &[usize], cfg: &TrainConfig) -> Result<Vec<usize>> {
    let k = data.k();
    let n_labeled = (cfg.label_fraction * train.len() as f64).round() as usize;
    if cfg.loss == ToyLoss::Clop && n_labeled < k {
        return Err(Error::InsufficientLabels {
            labeled: n_labeled,
            classes: k,
        });
    }
    let mut stream = Stream::derive(cfg.seed, SALT_LABELS);
    let mut by_class = vec![Vec::new(); k];
    train.iter().for_each(|&i| by_class[data.labels[i]].push(i));
    let mut chosen = Vec::with_capacity(n_labeled);
    let mut rest = Vec::new();
    for members in &by_class {
        let order = stream.permutation(members.len());
        let mut shuffled = order.into_iter().map(|p| members[p]);
        chosen.extend(shuffled.next());
        rest.extend(shuffled);
    }
    chosen.truncate(n_labeled);
    let fill = n_labeled - chosen.len();
    let order = stream.permutation(rest.len());
    chosen.extend(order.into_iter().take(fill).map(|p| rest[p]));
    chosen.sort_unstable();
    Ok(chosen)
}

struct Evaluation<'a> {
    data: &'a SyntheticDataset,
    train: Vec<usize>,
    test: Vec<usize>,
    labeled: &'a [usize],
    protos: &'a PrototypeSet,
}

impl Evaluation<'_> {
    fn metrics(&self, enc: &Encoder, cfg: &TrainConfig, epoch: usize, loss: f64) -> Result<EpochMetrics> {
        let (u_train, y_train) = self.data.gather(&self.train);
        let (u_test, y_test) = self.data.gather(&self.test);
        let z_train = enc.encode(&u_train)?;
        let z_test = enc.encode(&u_test)?;
        let spectrum = singular_spectrum(z_test.data())?;
        let (u_lab, y_lab) = self.data.gather(self.labeled);
        let mean_proto_cos = if y_lab.is_empty() {
            0.0
        } else {
            let z_lab = enc.encode(&u_lab)?;
            let total: f64 = y_lab
                .iter()
                .enumerate()
                .map(|(i, &y)| dot(z_lab.row(i), self.protos.vector(y)))
                .sum();
            total / y_lab.len() as f64
        };
        Ok(EpochMetrics {
            epoch,
            loss,
            eff_rank: effective_rank(&spectrum, EFFECTIVE_RANK_EPS),
            np_acc: evaluate_nearest_prototype(&z_test, &y_test, self.protos)?,
            probe_acc: linear_probe(z_train.data(), &y_train, z_test.data(), &y_test, cfg.probe_epochs, cfg.probe_lr)?,
            mean_proto_cos,
        })
    }
}

/// Mini-batch descent; returns the trained encoder and per-epoch metrics on the
/// held-out split.
pub fn train(data: &SyntheticDataset, cfg: &TrainConfig) -> Result<(Encoder, TrainReport)> {
    cfg.validate()?;
    let k = data.k();
    if cfg.classes != k || cfg.d_in != data.inputs.cols() {
        return Err(Error::shape(
            format!("{} classes of width {}", cfg.classes, cfg.d_in),
            format!("{} classes of width {}", k, data.inputs.cols()),
        ));
    }
    let protos = PrototypeSet::generate(cfg.prototype_mode, k, cfg.embed_dim, mix(cfg.seed, SALT_PROTOS))?;
    let train_idx = data.indices(Split::Train);
    let labeled = choose_labeled(data, &train_idx, cfg)?;
    let mut label_of = vec![None; data.len()];
    labeled.iter().for_each(|&i| label_of[i] = Some(data.labels[i]));
    let lambda = match cfg.loss {
        ToyLoss::Clop => cfg.lambda,
        ToyLoss::Infonce => 0.0,
    };

    let mut enc = Encoder::init(cfg.d_in, cfg.embed_dim, cfg.nonlinearity, mix(cfg.seed, SALT_INIT));
    let eval = Evaluation {
        data,
        train: train_idx.clone(),
        test: data.indices(Split::Test),
        labeled: &labeled,
        protos: &protos,
    };
    let mut batches = Stream::derive(cfg.seed, SALT_BATCHES);
    let mut views = Stream::derive(cfg.seed, SALT_VIEWS);
    let mut epochs = Vec::with_capacity(cfg.epochs + 1);

    // epoch 0 scores the untrained encoder over one pass of fresh views
    let mut probe_views = Stream::derive(cfg.seed, SALT_VIEWS ^ 1);
    let mut initial = 0.0;
    let chunks: Vec<&[usize]> = train_idx.chunks(cfg.batch_size).collect();
    for chunk in &chunks {
        let (u, batch) = build_views(data, chunk, &label_of, cfg.jitter_std, &mut probe_views)?;
        let x = enc.forward_raw(&u)?;
        let pairs = PairMap::adjacent(u.rows())?;
        initial += clop_total_with(&x, &pairs, &batch, &protos, cfg.tau, lambda, cfg.similarity, Reduction::Mean)?.value;
    }
    epochs.push(eval.metrics(&enc, cfg, 0, initial / chunks.len() as f64)?);

    for epoch in 1..=cfg.epochs {
        let order: Vec<usize> = batches.permutation(train_idx.len()).into_iter().map(|p| train_idx[p]).collect();
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (u, batch) = build_views(data, chunk, &label_of, cfg.jitter_std, &mut views)?;
            let x = enc.forward_raw(&u)?;
            let pairs = PairMap::adjacent(u.rows())?;
            let report = clop_total_with(&x, &pairs, &batch, &protos, cfg.tau, lambda, cfg.similarity, Reduction::Mean)?;
            if !report.value.is_finite() {
                return Err(Error::NonFinite { step: epoch });
            }
            let grads = enc.backward(&u, &report.grad_raw)?;
            enc.apply(&grads, cfg.lr)?;
            total += report.value;
            count += 1;
        }
        epochs.push(eval.metrics(&enc, cfg, epoch, total / count as f64)?);
    }
    Ok((
        enc,
        TrainReport {
            config: cfg.clone(),
            labeled,
            epochs,
        },
    ))
}

/// Generates the dataset described by `cfg` and trains on it.
pub fn run_toy(cfg: &TrainConfig) -> Result<(Encoder, TrainReport)> {
    cfg.validate()?;
    train(&cfg.dataset()?, cfg)
}

/// Two jittered views per point, stored at rows `2i` and `2i + 1`.
fn build_views(
    data: &SyntheticDataset,
    chunk: &[usize],
    label_of: &[Option<usize>],
    jitter_std: f64,
    stream: &mut Stream,
) -> Result<(Matrix, LabeledBatch)> {
    let d = data.inputs.cols();
    let mut rows = Vec::with_capacity(2 * chunk.len() * d);
    let mut labels = Vec::with_capacity(2 * chunk.len());
    for &i in chunk {
        for _ in 0..2 {
            rows.extend(augment(data.inputs.row(i), jitter_std, stream));
            labels.push(label_of[i]);
        }
    }
    Ok((Matrix::from_vec(2 * chunk.len(), d, rows)?, LabeledBatch::new(labels, data.k())?))
}

/// Fraction of rows whose most similar prototype is their label's.
pub fn evaluate_nearest_prototype(z: &UnitEmbeddingSet, labels: &[usize], protos: &PrototypeSet) -> Result<f64> {
    if labels.len() != z.n_points() {
        return Err(Error::shape(format!("{} labels", z.n_points()), labels.len().to_string()));
    }
    if z.dim() != protos.dim() {
        return Err(Error::shape(format!("dimension {}", protos.dim()), z.dim().to_string()));
    }
    if labels.is_empty() {
        return Err(Error::invalid("labels", "no points to evaluate"));
    }
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= protos.k() {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: y,
                classes: protos.k(),
            });
        }
        let scores: Vec<f64> = (0..protos.k()).map(|c| dot(z.row(i), protos.vector(c))).collect();
        if argmax(&scores) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// First index of the largest value.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// Multinomial logistic regression on frozen features, zero-initialized and
/// trained by full-batch gradient descent; returns test accuracy.
pub fn linear_probe(
    x_train: &Matrix,
    y_train: &[usize],
    x_test: &Matrix,
    y_test: &[usize],
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    if x_train.rows() != y_train.len() || x_test.rows() != y_test.len() {
        return Err(Error::shape("one label per row", format!("{} and {} labels", y_train.len(), y_test.len())));
    }
    if x_train.cols() != x_test.cols() {
        return Err(Error::shape(format!("{} feature columns", x_train.cols()), x_test.cols().to_string()));
    }
    if y_test.is_empty() {
        return Err(Error::invalid("y_test", "no test points"));
    }
    let classes = y_train.iter().chain(y_test).max().map_or(0, |&m| m + 1);
    if classes <= 1 {
        return Ok(1.0);
    }
    let d = x_train.cols();
    let n = x_train.rows().max(1) as f64;
    let mut w = Matrix::zeros(classes, d);
    let mut b = vec![0.0; classes];
    let mut probs = vec![0.0; classes];
    for _ in 0..epochs {
        let mut gw = Matrix::zeros(classes, d);
        let mut gb = vec![0.0; classes];
        for (i, &y) in y_train.iter().enumerate() {
            let xi = x_train.row(i);
            for (c, p) in probs.iter_mut().enumerate() {
                *p = dot(w.row(c), xi) + b[c];
            }
            let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            probs.iter_mut().for_each(|p| {
                *p = (*p - max).exp();
                sum += *p;
            });
            for (c, &p) in probs.iter().enumerate() {
                let r = p / sum - if c == y { 1.0 } else { 0.0 };
                gb[c] += r;
                gw.row_mut(c).iter_mut().zip(xi).for_each(|(g, x)| *g += r * x);
            }
        }
        w = w.add_scaled(&gw, -lr / n)?;
        b.iter_mut().zip(&gb).for_each(|(bc, g)| *bc -= lr * g / n);
    }
    let correct = y_test
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let scores: Vec<f64> = (0..classes).map(|c| dot(w.row(c), x_test.row(i)) + b[c]).collect();
            argmax(&scores) == y
        })
        .count();
    Ok(correct as f64 / y_test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::generate_orthonormal;

    fn quick(loss: ToyLoss, seed: u64) -> TrainConfig {
        TrainConfig {
            loss,
            classes: 3,
            d_in: 6,
            embed_dim: 4,
            per_class: 8,
            batch_size: 5,
            epochs: 3,
            label_fraction: 0.5,
            probe_epochs: 20,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mixture_examples() {
        let a = gen_mixture(3, 5, 8, 2.0, 0.0, 11).unwrap();
        for i in 0..a.len() {
            let first = a.labels.iter().position(|&l| l == a.labels[i]).unwrap();
            assert_eq!(a.inputs.row(i), a.inputs.row(first));
        }
        let b = gen_mixture(3, 5, 8, 2.0, 0.7, 11).unwrap();
        assert_eq!(b, gen_mixture(3, 5, 8, 2.0, 0.7, 11).unwrap());
        for c in 0..3 {
            for s in [Split::Train, Split::Test] {
                assert!(b.indices(s).iter().any(|&i| b.labels[i] == c));
            }
        }
        assert!(gen_mixture(1, 5, 8, 1.0, 1.0, 0).is_err());
        assert!(gen_mixture(3, 5, 3, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn augment_examples() {
        let x = [1.5, -2.0, 0.25];
        assert_eq!(augment(&x, 0.0, &mut Stream::new(1)), x.to_vec());
        assert_eq!(augment(&x, 0.3, &mut Stream::new(1)), augment(&x, 0.3, &mut Stream::new(1)));
        let mut st = Stream::new(2);
        let jitter = 0.5;
        let mut mean = [0.0; 3];
        let reps = 10_000;
        for _ in 0..reps {
            for (m, v) in mean.iter_mut().zip(augment(&x, jitter, &mut st)) {
                *m += v / reps as f64;
            }
        }
        for (m, v) in mean.iter().zip(x) {
            assert!((m - v).abs() <= 5.0 * jitter / 100.0);
        }
    }

    #[test]
    fn identity_encoder_is_normalize() {
        let enc = Encoder::new(Matrix::identity(3), vec![0.0; 3], Nonlinearity::None).unwrap();
        let u = Matrix::from_rows(&[[3.0, 0.0, 4.0], [0.0, -2.0, 0.0]]).unwrap();
        let z = enc.encode(&u).unwrap();
        assert_eq!(z, normalize(&RawEmbeddingSet::new(u.clone()).unwrap()).unwrap());
        let zero = Matrix::zeros(1, 3);
        assert_eq!(enc.encode(&zero).unwrap_err(), Error::ZeroNormRow(0));
    }

    fn scalar_loss(enc: &Encoder, u: &Matrix, target: &Matrix) -> f64 {
        let z = enc.encode(u).unwrap();
        z.data().as_slice().iter().zip(target.as_slice()).map(|(a, t)| a * t).sum::<f64>()
            + z.data().as_slice().iter().map(|a| a * a * a).sum::<f64>()
    }

    #[test]
    fn backward_matches_finite_differences() {
        for nl in [Nonlinearity::None, Nonlinearity::Tanh] {
            let mut st = Stream::new(8);
            let enc = Encoder::new(st.gaussian_matrix(4, 5, 0.6), (0..4).map(|_| 0.3 * st.gaussian()).collect(), nl).unwrap();
            let u = st.gaussian_matrix(6, 5, 1.0);
            let target = st.gaussian_matrix(6, 4, 1.0);
            // d/dz of the loss above, then through normalization
            let x = enc.forward_raw(&u).unwrap();
            let z = normalize(&x).unwrap();
            let gz = Matrix::from_fn(6, 4, |i, j| target[(i, j)] + 3.0 * z.data()[(i, j)].powi(2));
            let grads = enc.backward(&u, &crate::embedding::pullback_rows(&x, &gz).unwrap()).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for r in 0..4 {
                for c in 0..5 {
                    let mut p = enc.clone();
                    p.weights[(r, c)] += h;
                    let mut m = enc.clone();
                    m.weights[(r, c)] -= h;
                    let fd = (scalar_loss(&p, &u, &target) - scalar_loss(&m, &u, &target)) / (2.0 * h);
                    let an = grads.weights[(r, c)];
                    worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
                }
                let mut p = enc.clone();
                p.bias[r] += h;
                let mut m = enc.clone();
                m.bias[r] -= h;
                let fd = (scalar_loss(&p, &u, &target) - scalar_loss(&m, &u, &target)) / (2.0 * h);
                worst = worst.max((fd - grads.bias[r]).abs() / grads.bias[r].abs().max(1e-3));
            }
            assert!(worst <= 1e-5, "{nl:?}: {worst:e}");
        }
    }

    #[test]
    fn nearest_prototype_examples() {
        let protos = generate_orthonormal(3, 3, 5).unwrap();
        let z = UnitEmbeddingSet::new(protos.vectors().clone()).unwrap();
        assert_eq!(evaluate_nearest_prototype(&z, &[0, 1, 2], &protos).unwrap(), 1.0);

        let axes = PrototypeSet::from_parts(Matrix::identity(2), PrototypeMode::Orthonormal, 0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let tie = UnitEmbeddingSet::from_rows(&[[h, h]]).unwrap();
        assert_eq!(evaluate_nearest_prototype(&tie, &[0], &axes).unwrap(), 1.0);
        assert_eq!(evaluate_nearest_prototype(&tie, &[1], &axes).unwrap(), 0.0);

        // predictions: 0, 1, 0 (tie), 1 against labels 0, 0, 0, 1
        let four = UnitEmbeddingSet::from_rows(&[[1.0, 0.0], [0.6, 0.8], [h, h], [-0.6, 0.8]]).unwrap();
        assert_eq!(evaluate_nearest_prototype(&four, &[0, 0, 0, 1], &axes).unwrap(), 0.75);
        assert!(matches!(
            evaluate_nearest_prototype(&four, &[0, 0, 2, 1], &axes),
            Err(Error::LabelOutOfRange { index: 2, label: 2, classes: 2 })
        ));
    }

    #[test]
    fn probe_examples() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(linear_probe(&x, &[0, 0], &x, &[0, 0], 5, 1.0).unwrap(), 1.0);

        let mut st = Stream::new(3);
        let centres = Matrix::identity(4);
        let make = |st: &mut Stream, n: usize| {
            let mut rows = Vec::new();
            let mut ys = Vec::new();
            for i in 0..n {
                let c = i % 4;
                rows.push(centres.row(c).iter().map(|v| v + 0.05 * st.gaussian()).collect::<Vec<_>>());
                ys.push(c);
            }
            (Matrix::from_rows(&rows).unwrap(), ys)
        };
        let (xt, yt) = make(&mut st, 80);
        let (xs, ys) = make(&mut st, 40);
        let acc = linear_probe(&xt, &yt, &xs, &ys, 100, 1.0).unwrap();
        assert!(acc >= 0.99, "{acc}");
        assert_eq!(acc, linear_probe(&xt, &yt, &xs, &ys, 100, 1.0).unwrap());
    }

    #[test]
    fn raw_input_logistic_oracle_separates_the_mixture() {
        let data = TrainConfig::default().dataset().unwrap();
        let (ut, yt) = data.gather(&data.indices(Split::Train));
        let (us, ys) = data.gather(&data.indices(Split::Test));
        let acc = linear_probe(&ut, &yt, &us, &ys, 200, 0.01).unwrap();
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn labels_are_stratified() {
        let cfg = quick(ToyLoss::Clop, 4);
        let data = cfg.dataset().unwrap();
        let train = data.indices(Split::Train);
        let chosen = choose_labeled(&data, &train, &cfg).unwrap();
        assert_eq!(chosen.len(), 9);
        for c in 0..3 {
            assert!(chosen.iter().any(|&i| data.labels[i] == c));
        }
        assert!(chosen.iter().all(|i| train.contains(i)));
    }

    #[test]
    fn too_few_labels_is_an_error() {
        let cfg = TrainConfig { label_fraction: 0.001, ..quick(ToyLoss::Clop, 1) };
        assert_eq!(run_toy(&cfg).unwrap_err(), Error::InsufficientLabels { labeled: 0, classes: 3 });
        let baseline = TrainConfig { loss: ToyLoss::Infonce, ..cfg };
        assert!(run_toy(&baseline).is_ok());
    }

    #[test]
    fn zero_lambda_matches_infonce_exactly() {
        let clop = TrainConfig { lambda: 0.0, ..quick(ToyLoss::Clop, 5) };
        let base = quick(ToyLoss::Infonce, 5);
        let (ea, ra) = run_toy(&clop).unwrap();
        let (eb, rb) = run_toy(&base).unwrap();
        assert_eq!(ea, eb);
        assert_eq!(ra.epochs, rb.epochs);
    }

    #[test]
    fn report_shape_and_ranges() {
        let (_, rep) = run_toy(&quick(ToyLoss::Clop, 2)).unwrap();
        assert_eq!(rep.epochs.len(), 4);
        for (e, m) in rep.epochs.iter().enumerate() {
            assert_eq!(m.epoch, e);
            assert!((0.0..=1.0).contains(&m.np_acc) && (0.0..=1.0).contains(&m.probe_acc));
            assert!(m.eff_rank <= 4);
        }
        assert_eq!(rep, run_toy(&quick(ToyLoss::Clop, 2)).unwrap().1);
    }
}

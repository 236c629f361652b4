//! Softmax classifier head on frozen features: importance-weighted
//! pre-training, few-shot fine-tuning, evaluation, and the ALL / RND / MN
//! class-selection baselines.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassWeights, FeatureMatrix, LabeledDataset};
use crate::distance::pairwise_distances;
use crate::error::{Error, Result};
use crate::select::{reweighted_objective, select_class_weights, weights_to_sample_probabilities, SolverChoice};
use crate::sinkhorn::SinkhornConfig;

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Serialize, Deserialize)]
struct HeadDocument {
    classes: Vec<u64>,
    matrix: Vec<Vec<f64>>,
}

/// Linear map from features to logits, one row per output class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HeadDocument", into = "HeadDocument")]
pub struct SoftmaxHead {
    classes: Vec<u64>,
    dim: usize,
    matrix: Vec<f64>,
}

impl TryFrom<HeadDocument> for SoftmaxHead {
    type Error = Error;

    fn try_from(doc: HeadDocument) -> Result<Self> {
        let dim = doc.matrix.first().map_or(0, Vec::len);
        if doc.matrix.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("head matrix rows have different lengths".into()));
        }
        SoftmaxHead::new(doc.classes, dim, doc.matrix.concat())
    }
}

impl From<SoftmaxHead> for HeadDocument {
    fn from(h: SoftmaxHead) -> Self {
        HeadDocument {
            matrix: h.matrix.chunks(h.dim).map(<[f64]>::to_vec).collect(),
            classes: h.classes,
        }
    }
}

impl SoftmaxHead {
    pub fn new(classes: Vec<u64>, dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if classes.is_empty() || dim == 0 {
            return Err(Error::InvalidInput("head needs at least one class and one feature".into()));
        }
        let mut sorted = classes.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("duplicate class id in head".into()));
        }
        if matrix.len() != classes.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} classes x {dim} features",
                matrix.len(),
                classes.len()
            )));
        }
        if let Some(i) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { row: i / dim, col: i % dim });
        }
        Ok(SoftmaxHead { classes, dim, matrix })
    }

    pub fn zeros(classes: Vec<u64>, dim: usize) -> Result<Self> {
        let len = classes.len() * dim;
        SoftmaxHead::new(classes, dim, vec![0.0; len])
    }

    pub fn classes(&self) -> &[u64] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.matrix[c * self.dim..(c + 1) * self.dim]
    }

    pub fn class_index(&self, id: u64) -> Option<usize> {
        self.classes.iter().position(|&c| c == id)
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.matrix
            .chunks(self.dim)
            .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn predict_proba(&self, z: &[f64]) -> Vec<f64> {
        softmax(&self.logits(z))
    }

    /// Argmax over logits; ties go to the smallest class index.
    pub fn predict(&self, z: &[f64]) -> usize {
        let logits = self.logits(z);
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[best] {
                best = c;
            }
        }
        best
    }

    pub fn check_features(&self, features: &FeatureMatrix) -> Result<()> {
        if features.cols() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "head expects {} features, got {}",
                self.dim,
                features.cols()
            )));
        }
        Ok(())
    }

    /// Class probabilities for every row.
    pub fn probabilities(&self, features: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        self.check_features(features)?;
        Ok(features.iter_rows().map(|z| self.predict_proba(z)).collect())
    }

    /// Same map over a different class list: shared ids keep their rows,
    /// the rest get zero rows.
    pub fn lifted(&self, classes: &[u64]) -> Result<SoftmaxHead> {
        let mut matrix = vec![0.0; classes.len() * self.dim];
        for (c, &id) in classes.iter().enumerate() {
            if let Some(src) = self.class_index(id) {
                matrix[c * self.dim..(c + 1) * self.dim].copy_from_slice(self.row(src));
            }
        }
        SoftmaxHead::new(classes.to_vec(), self.dim, matrix)
    }

    /// Head-row index of each dataset class.
    pub fn map_classes(&self, class_ids: &[u64]) -> Result<Vec<usize>> {
        class_ids
            .iter()
            .map(|&id| self.class_index(id).ok_or(Error::UnknownLabel(id)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("head serializes")
    }

    pub fn from_json(path: &Path, text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::malformed(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SoftmaxHead::from_json(path, &text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2_penalty: f64,
    /// Stop after this many epochs without improvement of the monitored
    /// loss. Zero disables early stopping.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            l2_penalty: 1e-4,
            early_stop_patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(Error::Config(format!("l2 penalty must be nonnegative, got {}", self.l2_penalty)));
        }
        Ok(())
    }
}

/// `sum_j p_j * CE(y_j, softmax(V z_j)) + l2/2 * |V|^2` and its gradient
/// with respect to the row-major head matrix. `targets` index head rows.
pub fn weighted_loss_and_gradient(
    head: &SoftmaxHead,
    features: &FeatureMatrix,
    targets: &[usize],
    probs: &[f64],
    l2_penalty: f64,
) -> (f64, Vec<f64>) {
    let rows: Vec<usize> = (0..targets.len()).filter(|&j| probs[j] != 0.0).collect();
    batch_loss_and_gradient(head, features, targets, probs, &rows, 1.0, l2_penalty)
}

fn batch_loss_and_gradient(
    head: &SoftmaxHead,
    features: &FeatureMatrix,
    targets: &[usize],
    probs: &[f64],
    rows: &[usize],
    scale: f64,
    l2_penalty: f64,
) -> (f64, Vec<f64>) {
    let dim = head.dim;
    let mut grad: Vec<f64> = head.matrix.iter().map(|v| l2_penalty * v).collect();
    let mut loss = 0.5 * l2_penalty * head.matrix.iter().map(|v| v * v).sum::<f64>();
    for &j in rows {
        let z = features.row(j);
        let logits = head.logits(z);
        let y = targets[j];
        let w = scale * probs[j];
        loss += w * (log_sum_exp(&logits) - logits[y]);
        let p = softmax(&logits);
        for (c, pc) in p.iter().enumerate() {
            let coef = w * (pc - if c == y { 1.0 } else { 0.0 });
            if coef != 0.0 {
                for (g, x) in grad[c * dim..(c + 1) * dim].iter_mut().zip(z) {
                    *g += coef * x;
                }
            }
        }
    }
    (loss, grad)
}

fn mean_cross_entropy(head: &SoftmaxHead, features: &FeatureMatrix, targets: &[usize]) -> f64 {
    let total: f64 = features
        .iter_rows()
        .zip(targets)
        .map(|(z, &y)| {
            let logits = head.logits(z);
            log_sum_exp(&logits) - logits[y]
        })
        .sum();
    total / targets.len() as f64
}

#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub head: SoftmaxHead,
    /// Full weighted training loss after each epoch.
    pub loss_history: Vec<f64>,
    /// Validation loss after each epoch, when a validation set was given.
    pub validation_history: Vec<f64>,
    /// Epoch (1-based) whose weights were kept; 0 means the initial head.
    pub best_epoch: usize,
}

fn check_probs(probs: &[f64], rows: usize) -> Result<()> {
    if probs.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "{} sample probabilities for {rows} rows",
            probs.len()
        )));
    }
    if let Some(i) = probs.iter().position(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidInput(format!("sample probability {i} is {}", probs[i])));
    }
    let total: f64 = probs.iter().sum();
    if total == 0.0 {
        return Err(Error::DegenerateInput("all sample probabilities are zero".into()));
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("sample probabilities sum to {total}")));
    }
    Ok(())
}

/// Mini-batch gradient descent from `init`. Each batch step uses the
/// unbiased estimate `(N / |B|) * sum_{j in B} p_j grad CE_j` over the `N`
/// rows with positive probability. The head with the lowest monitored loss
/// (validation if given, else training) is returned.
fn fit(
    init: SoftmaxHead,
    features: &FeatureMatrix,
    targets: &[usize],
    probs: &[f64],
    cfg: &TrainConfig,
    validation: Option<(&FeatureMatrix, &[usize])>,
) -> Result<TrainedHead> {
    cfg.validate()?;
    init.check_features(features)?;
    check_probs(probs, features.rows())?;
    if let Some((vf, _)) = validation {
        init.check_features(vf)?;
    }
    let mut order: Vec<usize> = (0..probs.len()).filter(|&j| probs[j] > 0.0).collect();
    let active = order.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let monitor = |h: &SoftmaxHead, train_loss: f64| match validation {
        Some((vf, vt)) => mean_cross_entropy(h, vf, vt),
        None => train_loss,
    };

    let mut head = init;
    let initial_loss = weighted_loss_and_gradient(&head, features, targets, probs, cfg.l2_penalty).0;
    let mut best = (monitor(&head, initial_loss), head.clone(), 0usize);
    let mut stale = 0;
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut validation_history = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = active / batch.len() as f64;
            let (_, grad) = batch_loss_and_gradient(&head, features, targets, probs, batch, scale, cfg.l2_penalty);
            for (v, g) in head.matrix.iter_mut().zip(&grad) {
                *v -= cfg.learning_rate * g;
            }
        }
        if head.matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure(format!(
                "training diverged at epoch {epoch}; lower the learning rate"
            )));
        }
        let loss = weighted_loss_and_gradient(&head, features, targets, probs, cfg.l2_penalty).0;
        loss_history.push(loss);
        let monitored = monitor(&head, loss);
        if validation.is_some() {
            validation_history.push(monitored);
        }
        if monitored < best.0 {
            best = (monitored, head.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainedHead {
        head: best.1,
        loss_history,
        validation_history,
        best_epoch: best.2,
    })
}

/// Pre-training on source data with per-sample importance weights. The head
/// has one output per dataset class and starts at zero.
pub fn train_head(dataset: &LabeledDataset, sample_probs: &[f64], cfg: &TrainConfig) -> Result<TrainedHead> {
    let init = SoftmaxHead::zeros(dataset.class_ids().to_vec(), dataset.features().cols())?;
    fit(init, dataset.features(), dataset.labels(), sample_probs, cfg, None)
}

/// Trains a new head for the dataset's classes with uniform sample weights.
/// Rows for class ids shared with `base` start from `base`, all others at
/// zero. An optional validation set drives early stopping.
pub fn finetune_head(
    dataset: &LabeledDataset,
    base: Option<&SoftmaxHead>,
    cfg: &TrainConfig,
    validation: Option<&LabeledDataset>,
) -> Result<TrainedHead> {
    let classes = dataset.class_ids().to_vec();
    let dim = dataset.features().cols();
    let init = match base {
        Some(b) => {
            if b.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "base head has {} features, data has {dim}",
                    b.dim()
                )));
            }
            b.lifted(&classes)?
        }
        None => SoftmaxHead::zeros(classes, dim)?,
    };
    let probs = vec![1.0 / dataset.len() as f64; dataset.len()];
    let val_targets = match validation {
        Some(v) => {
            let map = init.map_classes(v.class_ids())?;
            Some(v.labels().iter().map(|&l| map[l]).collect::<Vec<_>>())
        }
        None => None,
    };
    let val = validation.zip(val_targets.as_deref()).map(|(v, t)| (v.features(), t));
    fit(init, dataset.features(), dataset.labels(), &probs, cfg, val)
}

/// Stratified split holding out `round(fraction * n_c)` rows per class,
/// always leaving at least one row of each class for fitting. Returns
/// `None` for the held-out part when nothing was held out.
pub fn split_validation(
    dataset: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("validation fraction {fraction} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fit_rows = Vec::new();
    let mut held_rows = Vec::new();
    for c in 0..dataset.num_classes() {
        let mut rows: Vec<usize> = (0..dataset.len()).filter(|&j| dataset.labels()[j] == c).collect();
        rows.shuffle(&mut rng);
        let held = ((fraction * rows.len() as f64).round() as usize).min(rows.len() - 1);
        held_rows.extend_from_slice(&rows[..held]);
        fit_rows.extend_from_slice(&rows[held..]);
    }
    fit_rows.sort_unstable();
    held_rows.sort_unstable();
    let fit_set = dataset.subset(&fit_rows)?;
    let held_set = if held_rows.is_empty() {
        None
    } else {
        Some(dataset.subset(&held_rows)?)
    };
    Ok((fit_set, held_set))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub zero_one_error: f64,
    pub cross_entropy: f64,
    /// Accuracy per dataset class, in the order of `class_ids`.
    pub per_class_accuracy: Vec<f64>,
    pub class_ids: Vec<u64>,
    pub n_eval: usize,
    /// Expected error of the randomized classifier `y ~ h(x)`.
    pub induced_error: f64,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.zero_one_error
    }
}

pub fn evaluate(head: &SoftmaxHead, dataset: &LabeledDataset) -> Result<EvalReport> {
    head.check_features(dataset.features())?;
    let map = head.map_classes(dataset.class_ids())?;
    let k = dataset.num_classes();
    let mut correct = vec![0usize; k];
    let mut mistakes = 0usize;
    let mut ce = 0.0;
    let mut induced = 0.0;
    for (z, &label) in dataset.features().iter_rows().zip(dataset.labels()) {
        let y = map[label];
        let logits = head.logits(z);
        ce += log_sum_exp(&logits) - logits[y];
        induced += 1.0 - softmax(&logits)[y];
        if head.predict(z) == y {
            correct[label] += 1;
        } else {
            mistakes += 1;
        }
    }
    let n = dataset.len();
    Ok(EvalReport {
        zero_one_error: mistakes as f64 / n as f64,
        cross_entropy: ce / n as f64,
        per_class_accuracy: correct
            .iter()
            .zip(dataset.class_counts())
            .map(|(&c, &t)| c as f64 / t as f64)
            .collect(),
        class_ids: dataset.class_ids().to_vec(),
        n_eval: n,
        induced_error: induced / n as f64,
    })
}

/// Class-selection baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Uniform over all source classes.
    All,
    /// Uniform over a random nonempty subset.
    Rnd,
    /// Uniform over the classes whose means are nearest the target mean.
    Mn,
}

fn mean_row<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        count += 1;
    }
    acc.iter().map(|a| a / count as f64).collect()
}

fn uniform_over(k: usize, selected: &[usize]) -> Result<ClassWeights> {
    let mut w = vec![0.0; k];
    for &c in selected {
        w[c] = 1.0 / selected.len() as f64;
    }
    ClassWeights::new(w)
}

pub fn baseline_weights(
    method: Baseline,
    source: &LabeledDataset,
    target: &FeatureMatrix,
    seed: u64,
    mn_top: usize,
) -> Result<ClassWeights> {
    let k = source.num_classes();
    match method {
        Baseline::All => ClassWeights::uniform(k),
        Baseline::Rnd => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            loop {
                let chosen: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
                if !chosen.is_empty() {
                    return uniform_over(k, &chosen);
                }
            }
        }
        Baseline::Mn => {
            if mn_top == 0 {
                return Err(Error::Config("MN baseline needs at least one class".into()));
            }
            if target.cols() != source.features().cols() {
                return Err(Error::DimensionMismatch(format!(
                    "source has {} features, target has {}",
                    source.features().cols(),
                    target.cols()
                )));
            }
            let dim = target.cols();
            let target_mean = mean_row(target.iter_rows(), dim);
            let mut dist: Vec<(f64, usize)> = (0..k)
                .map(|c| {
                    let rows = (0..source.len())
                        .filter(|&j| source.labels()[j] == c)
                        .map(|j| source.features().row(j));
                    let m = mean_row(rows, dim);
                    let d2: f64 = m.iter().zip(&target_mean).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2, c)
                })
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let chosen: Vec<usize> = dist.iter().take(mn_top.min(k)).map(|&(_, c)| c).collect();
            uniform_over(k, &chosen)
        }
    }
}

/// `budget` i.i.d. draws with replacement according to `sample_probs`.
pub fn resample_fixed_budget(
    dataset: &LabeledDataset,
    sample_probs: &[f64],
    budget: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if budget == 0 {
        return Err(Error::InvalidInput("budget must be at least 1".into()));
    }
    if sample_probs.len() != dataset.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} sample probabilities for {} rows",
            sample_probs.len(),
            dataset.len()
        )));
    }
    if sample_probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidInput("sample probabilities must be finite and nonnegative".into()));
    }
    if sample_probs.iter().all(|&p| p == 0.0) {
        return Err(Error::AllZeroProbabilities);
    }
    let dist = WeightedIndex::new(sample_probs).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<usize> = (0..budget).map(|_| dist.sample(&mut rng)).collect();
    dataset.subset(&rows)
}

/// How pre-training weights the source classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Wass,
    WassSinkhorn,
    All,
    Rnd,
    Mn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Wass => "wass",
            Method::WassSinkhorn => "wass_sinkhorn",
            Method::All => "all",
            Method::Rnd => "rnd",
            Method::Mn => "mn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wass" => Ok(Method::Wass),
            "wass_sinkhorn" | "wass-sinkhorn" => Ok(Method::WassSinkhorn),
            "all" => Ok(Method::All),
            "rnd" | "rand" => Ok(Method::Rnd),
            "mn" => Ok(Method::Mn),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub method: Method,
    pub seed: u64,
    /// Resample this many source rows instead of importance weighting.
    pub budget: Option<usize>,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub mn_top: usize,
    pub validation_fraction: f64,
    pub sinkhorn: SinkhornConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            method: Method::Wass,
            seed: 0,
            budget: None,
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            mn_top: 3,
            validation_fraction: 0.2,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

/// Independent streams derived from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub weights: ClassWeights,
    pub source_class_ids: Vec<u64>,
    /// Transport cost from the weighted source to the target training features.
    pub w1_objective: f64,
    pub support_size: usize,
    /// `Some(false)` when Sinkhorn stopped at its iteration cap.
    pub converged: Option<bool>,
    pub sample_probs: Vec<f64>,
    pub pretrained: TrainedHead,
    pub finetuned: TrainedHead,
    pub target_eval: EvalReport,
    pub timings_ms: Vec<(String, f64)>,
}

/// Class weights for any method, with the transport cost of the weighted
/// source against `target`.
pub fn method_weights(
    method: Method,
    source: &LabeledDataset,
    target: &FeatureMatrix,
    seed: u64,
    mn_top: usize,
    sinkhorn: &SinkhornConfig,
) -> Result<(ClassWeights, f64, Option<bool>)> {
    let d = pairwise_distances(source.features(), target)?;
    let k = source.num_classes();
    let solver = match method {
        Method::Wass => Some(SolverChoice::Exact),
        Method::WassSinkhorn => Some(SolverChoice::Sinkhorn),
        _ => None,
    };
    if let Some(solver) = solver {
        let sol = select_class_weights(&d, source.labels(), k, solver, sinkhorn)?;
        let converged = (method == Method::WassSinkhorn).then_some(sol.converged);
        return Ok((sol.weights.clamped(), sol.objective, converged));
    }
    let baseline = match method {
        Method::All => Baseline::All,
        Method::Rnd => Baseline::Rnd,
        _ => Baseline::Mn,
    };
    let w = baseline_weights(baseline, source, target, seed, mn_top)?;
    let objective = reweighted_objective(&d, source.labels(), &w)?;
    Ok((w, objective, None))
}

/// Select or weight source classes, pre-train on the weighted source,
/// fine-tune a head on the target training set, evaluate on the target test set.
pub fn run_pipeline(
    source: &LabeledDataset,
    target_train: &LabeledDataset,
    target_test: &LabeledDataset,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome> {
    let mut timings = Vec::new();
    let clock = std::time::Instant::now();
    let (weights, w1_objective, converged) = method_weights(
        cfg.method,
        source,
        target_train.features(),
        derive_seed(cfg.seed, 1),
        cfg.mn_top,
        &cfg.sinkhorn,
    )?;
    timings.push(("select".to_string(), clock.elapsed().as_secs_f64() * 1e3));

    let clock = std::time::Instant::now();
    let sample_probs = weights_to_sample_probabilities(&weights, source.labels())?;
    let pretrain_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 2),
        ..cfg.pretrain
    };
    let pretrained = match cfg.budget {
        Some(b) if b > 0 => {
            let drawn = resample_fixed_budget(source, &sample_probs, b, derive_seed(cfg.seed, 3))?;
            let uniform = vec![1.0 / drawn.len() as f64; drawn.len()];
            let mut trained = train_head(&drawn, &uniform, &pretrain_cfg)?;
            trained.head = trained.head.lifted(source.class_ids())?;
            trained
        }
        _ => train_head(source, &sample_probs, &pretrain_cfg)?,
    };
    timings.push(("pretrain".to_string(), clock.elapsed().as_secs_f64() * 1e3));

    let clock = std::time::Instant::now();
    let (fit_set, val_set) = split_validation(target_train, cfg.validation_fraction, derive_seed(cfg.seed, 4))?;
    let finetune_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 5),
        ..cfg.finetune
    };
    let finetuned = finetune_head(&fit_set, Some(&pretrained.head), &finetune_cfg, val_set.as_ref())?;
    timings.push(("finetune".to_string(), clock.elapsed().as_secs_f64() * 1e3));

    let target_eval = evaluate(&finetuned.head, target_test)?;
    Ok(PipelineOutcome {
        support_size: weights.support().len(),
        source_class_ids: source.class_ids().to_vec(),
        weights,
        w1_objective,
        converged,
        sample_probs,
        pretrained,
        finetuned,
        target_eval,
        timings_ms: timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn line_dataset() -> LabeledDataset {
        // bias column so a linear head can separate -1 from +1
        let f = FeatureMatrix::from_rows(&[[-1.0, 1.0], [-1.2, 1.0], [1.0, 1.0], [1.3, 1.0]]).unwrap();
        LabeledDataset::new(f, vec![0, 0, 1, 1], vec![0, 1]).unwrap()
    }

    fn random_head(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> SoftmaxHead {
        let m = (0..k * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        SoftmaxHead::new((0..k as u64).collect(), dim, m).unwrap()
    }

    fn full_batch(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs,
            batch_size: usize::MAX,
            seed: 3,
            l2_penalty: 0.0,
            early_stop_patience: 0,
        }
    }

    #[test]
    fn softmax_is_a_distribution_for_extreme_logits() {
        let p = softmax(&[1000.0, -1000.0, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn separable_training_decreases_loss_and_fits() {
        let data = line_dataset();
        let probs = vec![0.25; 4];
        let trained = train_head(&data, &probs, &full_batch(0.5, 50)).unwrap();
        for w in trained.loss_history.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert_eq!(evaluate(&trained.head, &data).unwrap().zero_one_error, 0.0);
    }

    #[test]
    fn zero_weight_class_is_ignored() {
        let f = FeatureMatrix::from_rows(&[[-1.0, 1.0], [-2.0, 1.0], [1.0, 1.0], [2.0, 1.0]]).unwrap();
        let data = LabeledDataset::new(f, vec![0, 0, 1, 1], vec![0, 1]).unwrap();
        let trained = train_head(&data, &[0.5, 0.5, 0.0, 0.0], &full_batch(0.5, 30)).unwrap();
        let report = evaluate(&trained.head, &data).unwrap();
        assert_eq!(report.per_class_accuracy[0], 1.0);
    }

    #[test]
    fn all_zero_probabilities_rejected() {
        let data = line_dataset();
        let err = train_head(&data, &[0.0; 4], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput(_)));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = random_head(&mut rng, 3, 4);
        let values: Vec<f64> = (0..24).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x = FeatureMatrix::new(6, 4, values).unwrap();
        let targets = vec![0, 1, 2, 2, 1, 0];
        let probs = vec![0.1, 0.2, 0.3, 0.15, 0.05, 0.2];
        let (_, grad) = weighted_loss_and_gradient(&head, &x, &targets, &probs, 0.01);
        for i in 0..grad.len() {
            let mut plus = head.clone();
            plus.matrix[i] += 1e-5;
            let mut minus = head.clone();
            minus.matrix[i] -= 1e-5;
            let fd = (weighted_loss_and_gradient(&plus, &x, &targets, &probs, 0.01).0
                - weighted_loss_and_gradient(&minus, &x, &targets, &probs, 0.01).0)
                / 2e-5;
            assert!((fd - grad[i]).abs() <= 1e-5 * grad[i].abs().max(1e-3), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn weighting_equals_duplication_on_full_batch() {
        let data = line_dataset();
        let weighted = train_head(&data, &[0.5, 0.25, 0.125, 0.125], &full_batch(0.3, 10)).unwrap();
        let dup = data.subset(&[0, 0, 0, 0, 1, 1, 2, 3]).unwrap();
        let plain = train_head(&dup, &[0.125; 8], &full_batch(0.3, 10)).unwrap();
        for (a, b) in weighted.head.matrix().iter().zip(plain.head.matrix()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = line_dataset();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let a = train_head(&data, &[0.25; 4], &cfg).unwrap();
        let b = train_head(&data, &[0.25; 4], &cfg).unwrap();
        assert_eq!(a.head, b.head);
    }

    #[test]
    fn disjoint_base_starts_from_zero() {
        let data = line_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = SoftmaxHead::new(vec![7, 8], 2, (0..4).map(|_| rng.random()).collect()).unwrap();
        let cfg = full_batch(0.1, 20);
        let a = finetune_head(&data, None, &cfg, None).unwrap();
        let b = finetune_head(&data, Some(&base), &cfg, None).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
    }

    #[test]
    fn shared_ids_are_copied_from_base() {
        let base = SoftmaxHead::new(vec![1, 5], 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let lifted = base.lifted(&[5, 9]).unwrap();
        assert_eq!(lifted.matrix(), &[3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn evaluate_constant_head() {
        let head = SoftmaxHead::new(vec![0, 1], 1, vec![1.0, 0.0]).unwrap();
        let f = FeatureMatrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let zeros = LabeledDataset::new(f.clone(), vec![0, 0], vec![0]).unwrap();
        assert_eq!(evaluate(&head, &zeros).unwrap().zero_one_error, 0.0);
        let ones = LabeledDataset::new(f.clone(), vec![0, 0], vec![1]).unwrap();
        assert_eq!(evaluate(&head, &ones).unwrap().zero_one_error, 1.0);
        let unknown = LabeledDataset::new(f, vec![0, 0], vec![4]).unwrap();
        assert!(matches!(evaluate(&head, &unknown), Err(Error::UnknownLabel(4))));
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let head = SoftmaxHead::zeros(vec![4, 2, 9], 2).unwrap();
        assert_eq!(head.predict(&[1.0, -1.0]), 0);
    }

    #[test]
    fn evaluate_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = random_head(&mut rng, 4, 3);
        let values: Vec<f64> = (0..60).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let raw: Vec<u64> = (0..20).map(|i| i % 4).collect();
        let data = LabeledDataset::from_raw_labels(FeatureMatrix::new(20, 3, values).unwrap(), &raw).unwrap();
        let report = evaluate(&head, &data).unwrap();
        let mut wrong = 0;
        for j in 0..20 {
            let logits = head.logits(data.features().row(j));
            let mut arg = 0;
            for c in 0..4 {
                if logits[c] > logits[arg] {
                    arg = c;
                }
            }
            if head.classes()[arg] != raw[j] {
                wrong += 1;
            }
        }
        assert_eq!(report.zero_one_error, wrong as f64 / 20.0);
        let weighted: f64 = report
            .per_class_accuracy
            .iter()
            .zip(data.class_counts())
            .map(|(a, &n)| a * n as f64)
            .sum::<f64>()
            / 20.0;
        assert!((1.0 - weighted - report.zero_one_error).abs() <= 1e-9);
    }

    #[test]
    fn head_json_round_trip() {
        let head = SoftmaxHead::new(vec![3, 1], 2, vec![0.1, -2.5, 1e-300, 7.0]).unwrap();
        let back = SoftmaxHead::from_json(Path::new("h.json"), &head.to_json()).unwrap();
        assert_eq!(head, back);
        let bad = SoftmaxHead::from_json(Path::new("h.json"), r#"{"classes":[1],"matrix":[[1.0],[2.0]]}"#);
        assert!(bad.is_err());
    }

    fn two_cluster_source() -> (LabeledDataset, FeatureMatrix) {
        let f = FeatureMatrix::from_rows(&[
            [0.0, 0.0],
            [0.1, 0.0],
            [5.0, 5.0],
            [5.1, 5.0],
            [-5.0, 5.0],
            [-5.1, 5.0],
            [9.0, -9.0],
            [9.0, -9.1],
        ])
        .unwrap();
        let data = LabeledDataset::new(f, vec![0, 0, 1, 1, 2, 2, 3, 3], vec![10, 11, 12, 13]).unwrap();
        let target = FeatureMatrix::from_rows(&[[0.05, 0.1], [0.0, -0.1]]).unwrap();
        (data, target)
    }

    #[test]
    fn baselines() {
        let (data, target) = two_cluster_source();
        let all = baseline_weights(Baseline::All, &data, &target, 0, 3).unwrap();
        assert_eq!(all.as_slice(), &[0.25; 4]);
        let mn = baseline_weights(Baseline::Mn, &data, &target, 0, 3).unwrap();
        assert!(mn.as_slice()[0] > 0.0);
        assert_eq!(mn.support().len(), 3);
        let r1 = baseline_weights(Baseline::Rnd, &data, &target, 42, 3).unwrap();
        let r2 = baseline_weights(Baseline::Rnd, &data, &target, 42, 3).unwrap();
        assert_eq!(r1, r2);
        assert!(!r1.support().is_empty());
    }

    #[test]
    fn resampling() {
        let (data, _) = two_cluster_source();
        let mut point = vec![0.0; 8];
        point[0] = 1.0;
        let drawn = resample_fixed_budget(&data, &point, 5, 1).unwrap();
        assert_eq!(drawn.len(), 5);
        assert!(drawn.features().iter_rows().all(|r| r == data.features().row(0)));
        assert!(resample_fixed_budget(&data, &point, 0, 1).is_err());
        assert!(matches!(
            resample_fixed_budget(&data, &[0.0; 8], 3, 1),
            Err(Error::AllZeroProbabilities)
        ));
    }

    #[test]
    fn resampled_class_frequencies_concentrate() {
        let (data, _) = two_cluster_source();
        let budget = 20_000;
        let drawn = resample_fixed_budget(&data, &[0.125; 8], budget, 7).unwrap();
        for (&id, &count) in drawn.class_ids().iter().zip(drawn.class_counts()) {
            assert!(data.class_ids().contains(&id));
            let sigma = (budget as f64 * 0.25 * 0.75).sqrt();
            assert!((count as f64 - budget as f64 * 0.25).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn stratified_split_keeps_every_class() {
        let (data, _) = two_cluster_source();
        let (fit_set, held) = split_validation(&data, 0.5, 3).unwrap();
        assert_eq!(fit_set.num_classes(), 4);
        assert_eq!(held.unwrap().len(), 4);
        let (_, none) = split_validation(&data, 0.0, 3).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
    }
}

//! Terms of the transfer generalization bounds and numeric checks of the
//! inequalities between them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::{DiscreteJointDistribution, FeatureMatrix, LabeledDataset};
use crate::error::{Error, Result};
use crate::ot::{conditional_wasserstein_term, feature_marginal_wasserstein, joint_wasserstein, Weighting};
use crate::pipeline::{softmax, SoftmaxHead};

/// Tolerance used by every `holds` flag.
pub const HOLDS_TOL: f64 = 1e-9;

/// `sqrt(K - 1) / K`.
pub fn softmax_lipschitz_constant(k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidK(k));
    }
    Ok(((k - 1) as f64).sqrt() / k as f64)
}

fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest `|softmax(v) - softmax(v')|_1 / |v - v'|_2` over random logit
/// pairs. Trial `t` draws both vectors from `N(0, s^2)` with `s` cycling
/// through 0.1, 1, 10. Pairs closer than 1e-12 are skipped.
pub fn verify_softmax_lipschitz(k: usize, trials: usize, seed: u64) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidK(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = [0.1, 1.0, 10.0];
    let mut worst = 0.0f64;
    for t in 0..trials {
        let normal = Normal::new(0.0, scales[t % 3]).expect("positive scale");
        let v: Vec<f64> = (0..k).map(|_| rng.sample(normal)).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.sample(normal)).collect();
        let dist = l2_diff(&v, &w);
        if dist < 1e-12 {
            continue;
        }
        worst = worst.max(l1_diff(&softmax(&v), &softmax(&w)) / dist);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingularValue {
    pub value: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; `value` is then the best estimate.
    pub converged: bool,
}

const POWER_CAP: usize = 100_000;
const POLISH_CAP: usize = 100;

/// Rayleigh quotient `|M v|^2` and the next iterate `M^T M v / |M^T M v|`.
fn power_step(rows: usize, cols: usize, m: &[f64], v: &[f64]) -> (f64, Option<Vec<f64>>) {
    let mv: Vec<f64> = (0..rows)
        .map(|i| m[i * cols..(i + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect();
    let mut next = vec![0.0; cols];
    for (i, &s) in mv.iter().enumerate() {
        for (n, a) in next.iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
            *n += a * s;
        }
    }
    let rayleigh = mv.iter().map(|x| x * x).sum::<f64>();
    let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (rayleigh, None);
    }
    (rayleigh, Some(next.into_iter().map(|x| x / norm).collect()))
}

fn power_iteration(rows: usize, cols: usize, m: &[f64], start: Vec<f64>) -> SingularValue {
    let mut v = start;
    let mut prev = f64::NAN;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < POWER_CAP {
        iterations += 1;
        let (lambda, next) = power_step(rows, cols, m, &v);
        let Some(next) = next else {
            return SingularValue { value: lambda.sqrt(), iterations, converged: true };
        };
        v = next;
        if (lambda - prev).abs() < 1e-12 * lambda {
            prev = lambda;
            converged = true;
            break;
        }
        prev = lambda;
    }
    // a few more steps until the estimate stops moving at all
    if converged {
        for _ in 0..POLISH_CAP {
            iterations += 1;
            let (lambda, next) = power_step(rows, cols, m, &v);
            let Some(next) = next else { break };
            v = next;
            if lambda == prev {
                break;
            }
            prev = lambda;
        }
    }
    SingularValue { value: prev.max(0.0).sqrt(), iterations, converged }
}

/// Largest singular value of a row-major matrix by power iteration on
/// `M^T M` from the normalized all-ones vector. A second fixed start guards
/// against the all-ones vector being orthogonal to the top singular vector.
pub fn largest_singular_value(rows: usize, cols: usize, m: &[f64]) -> Result<SingularValue> {
    if m.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!("{} values for a {rows}x{cols} matrix", m.len())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    if m.iter().all(|&v| v == 0.0) {
        return Ok(SingularValue { value: 0.0, iterations: 0, converged: true });
    }
    let ones = vec![1.0 / (cols as f64).sqrt(); cols];
    let first = power_iteration(rows, cols, m, ones);
    let alt: Vec<f64> = (0..cols)
        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } * (1.0 + (i % 7) as f64))
        .collect();
    let norm = alt.iter().map(|x| x * x).sum::<f64>().sqrt();
    let second = power_iteration(rows, cols, m, alt.into_iter().map(|x| x / norm).collect());
    let best = if second.value > first.value { second } else { first };
    Ok(SingularValue {
        iterations: first.iterations + second.iterations,
        converged: first.converged && second.converged,
        ..best
    })
}

fn check_simplex_rows(probs: &[Vec<f64>]) -> Result<()> {
    for (i, row) in probs.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if row.iter().any(|p| !(*p >= -1e-12) || !p.is_finite()) || (total - 1.0).abs() > 1e-8 {
            return Err(Error::RowNotSimplex(i));
        }
    }
    Ok(())
}

/// `(1/2n) sum_j |h(x_j) - e_{y_j}|_1` for class-index labels.
pub fn induced_error(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let masses = vec![1.0 / labels.len().max(1) as f64; labels.len()];
    induced_error_weighted(probs, labels, &masses)
}

/// Mass-weighted version of [`induced_error`]. A label outside the row's
/// classes counts as a full error.
pub fn induced_error_weighted(probs: &[Vec<f64>], labels: &[usize], masses: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || masses.len() != labels.len() {
        return Err(Error::DimensionMismatch("probabilities, labels and masses must align".into()));
    }
    check_simplex_rows(probs)?;
    Ok(probs
        .iter()
        .zip(labels)
        .zip(masses)
        .map(|((row, &y), &w)| {
            let hit = row.get(y).copied().unwrap_or(0.0);
            let l1: f64 = row.iter().sum::<f64>() - hit + (1.0 - hit);
            w * 0.5 * l1
        })
        .sum())
}

/// Simulates the randomized classifier `y_hat ~ h(x)` on uniformly drawn
/// rows and returns the fraction of wrong predictions.
pub fn simulate_induced_error(probs: &[Vec<f64>], labels: &[usize], draws: usize, seed: u64) -> Result<f64> {
    check_simplex_rows(probs)?;
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::DimensionMismatch("probabilities and labels must align and be nonempty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wrong = 0usize;
    for _ in 0..draws {
        let j = rng.random_range(0..probs.len());
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs[j].len() - 1;
        for (c, p) in probs[j].iter().enumerate() {
            acc += p;
            if u < acc {
                pick = c;
                break;
            }
        }
        if pick != labels[j] {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / draws as f64)
}

/// Max row l2 norm.
pub fn beta_bound(features: &FeatureMatrix) -> f64 {
    features
        .iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    /// Largest observed `|h(x) - h(x')|_1 / |x - x'|_2` over sample pairs.
    pub lower: f64,
    /// `alpha * sigma_max(V)`.
    pub upper: f64,
}

fn rho_upper(head: &SoftmaxHead) -> Result<f64> {
    let alpha = softmax_lipschitz_constant(head.num_classes().max(2))?;
    Ok(alpha * largest_singular_value(head.num_classes(), head.dim(), head.matrix())?.value)
}

pub fn estimate_rho(head: &SoftmaxHead, features: &FeatureMatrix) -> Result<RhoEstimate> {
    let probs = head.probabilities(features)?;
    let mut lower = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..features.rows() {
        for j in i + 1..features.rows() {
            let dist = l2_diff(features.row(i), features.row(j));
            if dist < 1e-12 {
                continue;
            }
            pairs += 1;
            lower = lower.max(l1_diff(&probs[i], &probs[j]) / dist);
        }
    }
    if pairs == 0 {
        return Err(Error::InsufficientSamples);
    }
    Ok(RhoEstimate { lower, upper: rho_upper(head)? })
}

/// Induced error of a head on a joint distribution, weighted by atom mass.
pub fn joint_induced_error(p: &DiscreteJointDistribution, head: &SoftmaxHead) -> Result<f64> {
    if p.dim() != head.dim() {
        return Err(Error::DimensionMismatch(format!(
            "head expects {} features, distribution has {}",
            head.dim(),
            p.dim()
        )));
    }
    let probs: Vec<Vec<f64>> = p.atoms().iter().map(|a| head.predict_proba(&a.feature)).collect();
    let labels: Vec<usize> = p
        .atoms()
        .iter()
        .map(|a| head.class_index(a.label).unwrap_or(usize::MAX))
        .collect();
    induced_error_weighted(&probs, &labels, &p.masses())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifferenceCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub rho_upper: f64,
    pub w1_joint: f64,
}

/// `|eps_p(h) - eps_q(h)| <= max(rho_upper, 1) * W1_joint(p, q)` with a 0-1 label cost.
pub fn check_error_difference_bound(
    p: &DiscreteJointDistribution,
    q: &DiscreteJointDistribution,
    head: &SoftmaxHead,
) -> Result<DifferenceCheck> {
    let lhs = (joint_induced_error(p, head)? - joint_induced_error(q, head)?).abs();
    let rho = rho_upper(head)?;
    let w1_joint = joint_wasserstein(p, q, 1.0)?;
    let rhs = rho.max(1.0) * w1_joint;
    Ok(DifferenceCheck { lhs, rhs, holds: lhs <= rhs + HOLDS_TOL, rho_upper: rho, w1_joint })
}

/// `eps_source + max(rho, 1) * w1 + alpha * beta * sigma_max_diff`.
pub fn assemble_transfer_bound(
    eps_source_pretrained: f64,
    w1: f64,
    rho: f64,
    alpha: f64,
    beta: f64,
    sigma_max_diff: f64,
) -> f64 {
    eps_source_pretrained + rho.max(1.0) * w1 + alpha * beta * sigma_max_diff
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Classes both heads are lifted to: pre-trained classes, then new fine-tuned ones.
    pub classes: Vec<u64>,
    /// Induced error of the lifted pre-trained head on the (weighted) source.
    pub eps_source: f64,
    /// Induced error of the lifted fine-tuned head on the target.
    pub eps_target: f64,
    /// Argmax 0-1 errors of the same lifted heads.
    pub argmax_error_source: f64,
    pub argmax_error_target: f64,
    pub w1_marginal: f64,
    pub w1_joint: f64,
    /// Conditional label terms; `None` when the feature supports differ.
    pub cond_term_source: Option<f64>,
    pub cond_term_target: Option<f64>,
    /// `W1(marginals) + min(conditional terms)` when both exist.
    pub decomposition_rhs: Option<f64>,
    pub rho_hat: f64,
    pub rho_upper: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sigma_max_diff: f64,
    /// Bound with the fine-tuning term dropped.
    pub base_bound: f64,
    pub bound_value: f64,
    pub holds: bool,
    /// Smallest `eps_S + eps_T` over the two heads on this data. An
    /// empirical stand-in, not the infimum over the hypothesis class.
    pub lambda_hat: f64,
}

fn argmax_error(p: &DiscreteJointDistribution, head: &SoftmaxHead) -> f64 {
    p.atoms()
        .iter()
        .filter(|a| head.classes()[head.predict(&a.feature)] != a.label)
        .fold(0.0, |acc, a| acc + a.mass)
}

/// All bound terms for a pre-trained head `h` evaluated on the source and a
/// fine-tuned head `h'` evaluated on the target. Both heads are lifted to
/// the union of their classes so that `V_S - V_T` is defined.
/// `source_masses` defaults to uniform.
pub fn bound_report(
    pretrained: &SoftmaxHead,
    finetuned: &SoftmaxHead,
    source: &LabeledDataset,
    source_masses: Option<&[f64]>,
    target: &LabeledDataset,
) -> Result<BoundReport> {
    if pretrained.dim() != finetuned.dim() {
        return Err(Error::DimensionMismatch("heads have different feature dimensions".into()));
    }
    let mut classes = pretrained.classes().to_vec();
    for &c in finetuned.classes() {
        if !classes.contains(&c) {
            classes.push(c);
        }
    }
    let h = pretrained.lifted(&classes)?;
    let h_prime = finetuned.lifted(&classes)?;

    let uniform_source = vec![1.0 / source.len() as f64; source.len()];
    let masses = source_masses.unwrap_or(&uniform_source);
    let p = DiscreteJointDistribution::from_samples(source.features(), &source.raw_labels(), masses)?;
    let q_masses = vec![1.0 / target.len() as f64; target.len()];
    let q = DiscreteJointDistribution::from_samples(target.features(), &target.raw_labels(), &q_masses)?;

    let eps_source = joint_induced_error(&p, &h)?;
    let eps_target = joint_induced_error(&q, &h_prime)?;
    let w1_marginal = feature_marginal_wasserstein(&p, &q)?;
    let w1_joint = joint_wasserstein(&p, &q, 1.0)?;
    let cond = |w| match conditional_wasserstein_term(&p, &q, w) {
        Ok(v) => Ok(Some(v)),
        Err(Error::SupportMismatch) => Ok(None),
        Err(e) => Err(e),
    };
    let cond_term_source = cond(Weighting::Source)?;
    let cond_term_target = cond(Weighting::Target)?;
    let decomposition_rhs = match (cond_term_source, cond_term_target) {
        (Some(a), Some(b)) => Some(w1_marginal + a.min(b)),
        _ => None,
    };

    let features = source.features().stack(target.features())?;
    let rho = estimate_rho(&h, &features)?;
    let alpha = softmax_lipschitz_constant(classes.len().max(2))?;
    let beta = beta_bound(&features);
    let diff: Vec<f64> = h.matrix().iter().zip(h_prime.matrix()).map(|(a, b)| a - b).collect();
    let sigma_max_diff = largest_singular_value(classes.len(), h.dim(), &diff)?.value;

    let base_bound = assemble_transfer_bound(eps_source, w1_joint, rho.upper, alpha, beta, 0.0);
    let bound_value = assemble_transfer_bound(eps_source, w1_joint, rho.upper, alpha, beta, sigma_max_diff);
    let lambda_hat = [&h, &h_prime]
        .iter()
        .map(|head| Ok(joint_induced_error(&p, head)? + joint_induced_error(&q, head)?))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);

    Ok(BoundReport {
        argmax_error_source: argmax_error(&p, &h),
        argmax_error_target: argmax_error(&q, &h_prime),
        classes,
        eps_source,
        eps_target,
        w1_marginal,
        w1_joint,
        cond_term_source,
        cond_term_target,
        decomposition_rhs,
        rho_hat: rho.lower,
        rho_upper: rho.upper,
        alpha,
        beta,
        sigma_max_diff,
        base_bound,
        bound_value,
        holds: eps_target <= bound_value + HOLDS_TOL,
        lambda_hat,
    })
}

//! Randomized property suites over the transport solvers and the bound
//! inequalities, plus the instance generators they share with the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{
    check_error_difference_bound, induced_error, largest_singular_value, simulate_induced_error,
    softmax_lipschitz_constant, verify_softmax_lipschitz,
};
use crate::data::{DiscreteJointDistribution, FeatureMatrix, JointAtom};
use crate::distance::pairwise_distances;
use crate::error::Result;
use crate::ot::{
    conditional_wasserstein_term, feature_marginal_wasserstein, joint_wasserstein, solve_exact_ot, OtProblem,
    Weighting, GAP_TOL,
};
use crate::pipeline::{softmax, SoftmaxHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Smallest `allowed - observed` over all cases; negative means a violation.
    pub worst_slack: f64,
    pub passed: bool,
}

impl SuiteResult {
    fn new(name: &str) -> Self {
        SuiteResult {
            name: name.to_string(),
            cases: 0,
            failures: 0,
            worst_slack: f64::INFINITY,
            passed: true,
        }
    }

    fn record(&mut self, slack: f64) {
        self.cases += 1;
        self.worst_slack = self.worst_slack.min(slack);
        if !(slack >= 0.0) {
            self.failures += 1;
            self.passed = false;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random instances per suite (random pairs per K for the softmax suite).
    pub trials: usize,
    /// Simulated predictions per instance in the induced-error suite.
    pub draws: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 0, trials: 200, draws: 100_000 }
    }
}

fn normalized(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn random_points(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

fn joint_from(atoms: Vec<(Vec<f64>, u64, f64)>) -> DiscreteJointDistribution {
    let total: f64 = atoms.iter().map(|a| a.2).sum();
    DiscreteJointDistribution::new(
        atoms
            .into_iter()
            .map(|(feature, label, mass)| JointAtom { feature, label, mass: mass / total })
            .collect(),
    )
    .expect("generated masses are valid")
}

/// Random conditional label distribution over a nonempty subset of `0..labels`.
fn random_conditional(rng: &mut ChaCha8Rng, z: &[f64], labels: u64) -> Vec<(Vec<f64>, u64, f64)> {
    let mut out = Vec::new();
    for y in 0..labels {
        if rng.random_bool(0.6) {
            out.push((z.to_vec(), y, rng.random_range(0.05..1.0)));
        }
    }
    if out.is_empty() {
        out.push((z.to_vec(), rng.random_range(0..labels), 1.0));
    }
    out
}

/// Two joint distributions over the same finite feature support.
pub fn random_joint_pair_shared_support(rng: &mut ChaCha8Rng) -> (DiscreteJointDistribution, DiscreteJointDistribution) {
    let dim = rng.random_range(1..=3);
    let count = rng.random_range(2..=5);
    let zs = random_points(rng, count, dim);
    let labels = rng.random_range(2..=3);
    let mut p = Vec::new();
    let mut q = Vec::new();
    for z in &zs {
        let pz = rng.random_range(0.1..1.0);
        let qz = rng.random_range(0.1..1.0);
        let cp = random_conditional(rng, z, labels);
        let cq = random_conditional(rng, z, labels);
        let sp: f64 = cp.iter().map(|a| a.2).sum();
        let sq: f64 = cq.iter().map(|a| a.2).sum();
        p.extend(cp.into_iter().map(|(f, y, m)| (f, y, pz * m / sp)));
        q.extend(cq.into_iter().map(|(f, y, m)| (f, y, qz * m / sq)));
    }
    (joint_from(p), joint_from(q))
}

/// Joint distribution on fresh random atoms with labels in `0..labels`.
pub fn random_joint(rng: &mut ChaCha8Rng, atoms: usize, dim: usize, labels: u64) -> DiscreteJointDistribution {
    let zs = random_points(rng, atoms, dim);
    joint_from(
        zs.into_iter()
            .map(|z| {
                let y = rng.random_range(0..labels);
                (z, y, rng.random_range(0.05..1.0))
            })
            .collect(),
    )
}

/// Head over classes `0..k` with Gaussian entries of the given scale.
pub fn random_head(rng: &mut ChaCha8Rng, k: usize, dim: usize, scale: f64) -> SoftmaxHead {
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let m = (0..k * dim).map(|_| rng.sample(normal)).collect();
    SoftmaxHead::new((0..k as u64).collect(), dim, m).expect("finite entries")
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn softmax_lipschitz_suite(opts: &VerifyOptions) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("softmax_lipschitz");
    for (i, k) in [2usize, 3, 5, 10].into_iter().enumerate() {
        let worst = verify_softmax_lipschitz(k, opts.trials, opts.seed.wrapping_add(i as u64))?;
        suite.record(softmax_lipschitz_constant(k)? + 1e-9 - worst);
    }
    Ok(suite)
}

/// Simulated randomized-classifier error within three binomial standard
/// deviations of `1/2 E|h - Y|_1`, on 20 random heads and datasets.
pub fn induced_error_suite(opts: &VerifyOptions) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("induced_error");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x11);
    for case in 0..20 {
        let k = rng.random_range(2..=5);
        let dim = rng.random_range(1..=4);
        let n = rng.random_range(5..=40);
        let head = random_head(&mut rng, k, dim, 1.5);
        let x = FeatureMatrix::new(n, dim, random_matrix(&mut rng, n, dim))?;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let probs = head.probabilities(&x)?;
        let exact = induced_error(&probs, &labels)?;
        let simulated = simulate_induced_error(&probs, &labels, opts.draws, opts.seed.wrapping_add(case))?;
        let sigma = (exact * (1.0 - exact) / opts.draws as f64).sqrt();
        suite.record(3.0 * sigma - (simulated - exact).abs());
    }
    Ok(suite)
}

/// `|M u|_2 <= sigma_max(M)` for random matrices and unit vectors.
pub fn singular_value_suite(opts: &VerifyOptions) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("singular_value_operator_norm");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x22);
    for _ in 0..opts.trials {
        let rows = rng.random_range(1..=8);
        let cols = rng.random_range(1..=8);
        let m = random_matrix(&mut rng, rows, cols);
        let sigma = largest_singular_value(rows, cols, &m)?.value;
        let u = normalized_l2(random_matrix(&mut rng, 1, cols));
        let mu: f64 = (0..rows)
            .map(|i| {
                let dot: f64 = m[i * cols..(i + 1) * cols].iter().zip(&u).map(|(a, b)| a * b).sum();
                dot * dot
            })
            .sum::<f64>()
            .sqrt();
        suite.record(sigma + 1e-9 - mu);
    }
    Ok(suite)
}

fn normalized_l2(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    v.into_iter().map(|x| x / norm).collect()
}

/// Joint W1 against marginal W1 plus the smaller conditional term.
pub fn decomposition_suite(opts: &VerifyOptions) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("joint_decomposition");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x33);
    for _ in 0..opts.trials {
        let (p, q) = random_joint_pair_shared_support(&mut rng);
        let joint = joint_wasserstein(&p, &q, 1.0)?;
        let marginal = feature_marginal_wasserstein(&p, &q)?;
        let cs = conditional_wasserstein_term(&p, &q, Weighting::Source)?;
        let ct = conditional_wasserstein_term(&p, &q, Weighting::Target)?;
        suite.record(marginal + cs.min(ct) + 1e-7 - joint);
    }
    Ok(suite)
}

/// `|eps_p(h) - eps_q(h)| <= max(rho_upper, 1) * W1_joint` for random heads.
pub fn error_difference_suite(opts: &VerifyOptions) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("error_difference");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x44);
    for t in 0..opts.trials {
        let k = rng.random_range(2..=4);
        let dim = rng.random_range(1..=3);
        let scale = [0.5, 1.0, 3.0][t % 3];
        let head = random_head(&mut rng, k, dim, scale);
        let (np, nq) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let p = random_joint(&mut rng, np, dim, k as u64);
        let q = random_joint(&mut rng, nq, dim, k as u64);
        let check = check_error_difference_bound(&p, &q, &head)?;
        suite.record(check.rhs + 1e-9 - check.lhs);
    }
    Ok(suite)
}

/// Identity, symmetry, triangle inequality and the duality certificate of
/// the exact solver on random point clouds.
pub fn ot_metric_suite(opts: &VerifyOptions) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new("ot_metric");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x55);
    for _ in 0..opts.trials {
        let dim = rng.random_range(1..=3);
        let clouds: Vec<(FeatureMatrix, Vec<f64>)> = (0..3)
            .map(|_| {
                let n = rng.random_range(1..=8);
                let pts = FeatureMatrix::new(n, dim, random_matrix(&mut rng, n, dim)).expect("finite");
                let w = normalized((0..n).map(|_| rng.random_range(0.05..1.0)).collect());
                (pts, w)
            })
            .collect();
        let w1 = |a: usize, b: usize, suite: &mut SuiteResult| -> Result<f64> {
            let cost = pairwise_distances(&clouds[a].0, &clouds[b].0)?;
            let sol = solve_exact_ot(&OtProblem::new(&cost, clouds[a].1.clone(), clouds[b].1.clone())?)?;
            suite.record(GAP_TOL * (1.0 + sol.objective().abs()) - sol.duality_gap);
            Ok(sol.objective())
        };
        let self_distance = w1(0, 0, &mut suite)?;
        suite.record(1e-9 - self_distance);
        let ab = w1(0, 1, &mut suite)?;
        let ba = w1(1, 0, &mut suite)?;
        suite.record(1e-8 - (ab - ba).abs());
        let bc = w1(1, 2, &mut suite)?;
        let ac = w1(0, 2, &mut suite)?;
        suite.record(ab + bc + 1e-7 - ac);
    }
    Ok(suite)
}

/// Every suite, in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        softmax_lipschitz_suite(opts)?,
        induced_error_suite(opts)?,
        singular_value_suite(opts)?,
        decomposition_suite(opts)?,
        error_difference_suite(opts)?,
        ot_metric_suite(opts)?,
    ])
}

/// Ratio `|softmax(v) - softmax(v')|_1 / |v - v'|_2` for a pair of logits.
pub fn softmax_ratio(v: &[f64], w: &[f64]) -> f64 {
    let num: f64 = softmax(v).iter().zip(softmax(w)).map(|(a, b)| (a - b).abs()).sum();
    let den = v.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    num / den
}

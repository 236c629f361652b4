//! Joint optimization of source class weights and the transport plan.
//!
//! For source rows grouped into `k` classes with `n_i` rows each and `m`
//! uniformly weighted target rows, the problem is
//!
//! ```text
//! min  sum_rj D_rj P_rj
//! s.t. sum_r P_rj = 1/m              for every target column j
//!      sum_j P_rj = w_i / n_i         for every row r of class i
//!      P >= 0,  w in simplex
//! ```
//!
//! `w` never appears as a variable here. Each class gets one auxiliary
//! variable `t_i` (the shared row sum of its rows) and `w_i = n_i t_i` is
//! read off afterwards; nonnegativity and unit sum of `w` follow from
//! `P >= 0` and the column constraints.

use serde::Serialize;

use crate::data::{ClassWeights, TransportPlan, WEIGHT_CLAMP};
use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};
use crate::ot::{solve_exact_ot, OtProblem, GAP_TOL};
use crate::simplex::{self, LpOptions, StandardLp};
use crate::sinkhorn::{sinkhorn_class_weights, SinkhornConfig};

/// Above this many plan entries `SolverChoice::Auto` switches to Sinkhorn.
pub const AUTO_SINKHORN_THRESHOLD: usize = 4_000_000;

#[derive(Debug, Clone)]
pub struct ClassWeightSolution {
    pub weights: ClassWeights,
    pub plan: TransportPlan,
    /// Transport cost of `plan`: the W1 estimate between the reweighted
    /// source and the target.
    pub objective: f64,
    pub support_size: usize,
    /// Certified gap for exact solves; `None` for Sinkhorn.
    pub duality_gap: Option<f64>,
    pub iterations: usize,
    /// Set when Sinkhorn stopped at its iteration cap above tolerance.
    pub converged: bool,
}

impl ClassWeightSolution {
    pub fn support(&self) -> Vec<usize> {
        self.weights.support()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverChoice {
    Exact,
    Sinkhorn,
    Auto,
}

/// Source-row class membership derived from contiguous class blocks.
pub fn labels_from_counts(class_counts: &[usize]) -> Vec<usize> {
    class_counts
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat_n(i, n))
        .collect()
}

pub(crate) fn class_counts_of(labels: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::DimensionMismatch(format!("label {l} outside 0..{k}")));
        }
        counts[l] += 1;
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidInput(format!("class {i} has no source rows")));
    }
    Ok(counts)
}

pub(crate) fn check_shapes(d: &DistanceMatrix, labels: &[usize], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidInput("no source classes".into()));
    }
    if labels.len() != d.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} source labels for {} distance rows",
            labels.len(),
            d.rows()
        )));
    }
    class_counts_of(labels, k)
}

/// Exact solve for rows laid out in contiguous class blocks of the given sizes.
pub fn solve_class_weights(d: &DistanceMatrix, class_counts: &[usize]) -> Result<ClassWeightSolution> {
    let total: usize = class_counts.iter().sum();
    if total != d.rows() {
        return Err(Error::DimensionMismatch(format!(
            "class counts sum to {total}, distance matrix has {} rows",
            d.rows()
        )));
    }
    solve_class_weights_labeled(d, &labels_from_counts(class_counts), class_counts.len())
}

/// Exact solve for arbitrary row order; `labels[r]` is the dense class of source row `r`.
pub fn solve_class_weights_labeled(d: &DistanceMatrix, labels: &[usize], k: usize) -> Result<ClassWeightSolution> {
    let counts = check_shapes(d, labels, k)?;
    let (n, m) = (d.rows(), d.cols());

    let mut rhs = vec![0.0; n + m];
    rhs[n..].iter_mut().for_each(|v| *v = 1.0 / m as f64);
    let mut lp = StandardLp::new(rhs);
    for r in 0..n {
        for j in 0..m {
            lp.add_column(d.get(r, j), vec![(r, 1.0), (n + j, 1.0)]);
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (r, &l) in labels.iter().enumerate() {
        members[l].push(r);
    }
    let t_offset = n * m;
    for rows in &members {
        lp.add_column(0.0, rows.iter().map(|&r| (r, -1.0)).collect());
    }

    let basis = starting_basis(d, &members, m);
    let sol = simplex::solve(&lp, Some(&basis), &LpOptions::default())?;

    let mut plan = sol.x[..t_offset].to_vec();
    plan.iter_mut().for_each(|v| *v = v.max(0.0));
    let objective: f64 = plan.iter().zip(d.as_slice()).map(|(p, c)| p * c).sum();

    // feasible dual: lift any class whose multipliers sum negative, then
    // take the c-transform on the target side
    let mut y = sol.duals[..n].to_vec();
    for rows in &members {
        let s: f64 = rows.iter().map(|&r| y[r]).sum();
        if s < 0.0 {
            let shift = -s / rows.len() as f64;
            rows.iter().for_each(|&r| y[r] += shift);
        }
    }
    let dual: f64 = (0..m)
        .map(|j| (0..n).map(|r| d.get(r, j) - y[r]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / m as f64;
    let gap = objective - dual;
    if gap > GAP_TOL * (1.0 + objective.abs()) {
        return Err(Error::SolverFailure(format!(
            "class-weight LP duality gap {gap:e} above tolerance"
        )));
    }

    let row_sums: Vec<f64> = plan.chunks_exact(m).map(|r| r.iter().sum()).collect();
    let weights: Vec<f64> = members
        .iter()
        .map(|rows| rows.iter().map(|&r| row_sums[r]).sum())
        .collect();
    let weights = ClassWeights::new(weights)?;
    let source_marginal = labels
        .iter()
        .map(|&l| weights.as_slice()[l] / counts[l] as f64)
        .collect();
    let support_size = weights.support().len();
    Ok(ClassWeightSolution {
        plan: TransportPlan {
            rows: n,
            cols: m,
            plan,
            source_marginal,
            target_marginal: vec![1.0 / m as f64; m],
            objective,
        },
        weights,
        objective,
        support_size,
        duality_gap: Some(gap),
        iterations: sol.iterations,
        converged: true,
    })
}

/// Feasible basis putting all mass on the class closest (on average) to the
/// target: a northwest-corner tree over that class's rows, every other row
/// hung off target column 0 at zero flow, and that class's `t` variable.
fn starting_basis(d: &DistanceMatrix, members: &[Vec<usize>], m: usize) -> Vec<usize> {
    let mean_cost = |rows: &Vec<usize>| {
        rows.iter().map(|&r| d.row(r).iter().sum::<f64>()).sum::<f64>() / rows.len() as f64
    };
    let chosen = (0..members.len())
        .min_by(|&a, &b| mean_cost(&members[a]).total_cmp(&mean_cost(&members[b])))
        .unwrap();
    let rows = &members[chosen];
    let mut basis = Vec::with_capacity(d.rows() + m);

    let mut supply = vec![1.0 / rows.len() as f64; rows.len()];
    let mut demand = vec![1.0 / m as f64; m];
    let (mut a, mut j) = (0, 0);
    while a < rows.len() && j < m {
        basis.push(rows[a] * m + j);
        let x = supply[a].min(demand[j]);
        supply[a] -= x;
        demand[j] -= x;
        if a == rows.len() - 1 {
            j += 1;
        } else if j == m - 1 || supply[a] <= demand[j] {
            a += 1;
        } else {
            j += 1;
        }
    }
    for (i, other) in members.iter().enumerate() {
        if i != chosen {
            basis.extend(other.iter().map(|&r| r * m));
        }
    }
    basis.push(d.rows() * m + chosen);
    basis
}

/// Exact, Sinkhorn, or size-based automatic choice.
pub fn select_class_weights(
    d: &DistanceMatrix,
    labels: &[usize],
    k: usize,
    solver: SolverChoice,
    sinkhorn: &SinkhornConfig,
) -> Result<ClassWeightSolution> {
    let use_sinkhorn = match solver {
        SolverChoice::Exact => false,
        SolverChoice::Sinkhorn => true,
        SolverChoice::Auto => d.rows() * d.cols() > AUTO_SINKHORN_THRESHOLD,
    };
    if use_sinkhorn {
        sinkhorn_class_weights(d, labels, k, sinkhorn)
    } else {
        solve_class_weights_labeled(d, labels, k)
    }
}

/// Per-row source marginal `w_{c(r)} / n_{c(r)}`.
pub fn weights_to_sample_probabilities(weights: &ClassWeights, labels: &[usize]) -> Result<Vec<f64>> {
    let k = weights.len();
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::DimensionMismatch(format!(
                "label {l} but only {k} class weights"
            )));
        }
        counts[l] += 1;
    }
    let w = weights.as_slice();
    if let Some(i) = (0..k).find(|&i| counts[i] == 0 && w[i] > WEIGHT_CLAMP) {
        return Err(Error::InvalidInput(format!(
            "class {i} has weight {} but no samples",
            w[i]
        )));
    }
    Ok(labels
        .iter()
        .map(|&l| w[l].max(0.0) / counts[l] as f64)
        .collect())
}

/// Fixed-marginal OT objective for a given weighting of the source classes.
pub fn reweighted_objective(d: &DistanceMatrix, labels: &[usize], weights: &ClassWeights) -> Result<f64> {
    let mu = weights_to_sample_probabilities(weights, labels)?;
    let nu = vec![1.0 / d.cols() as f64; d.cols()];
    Ok(solve_exact_ot(&OtProblem::new(d, mu, nu)?)?.objective())
}

/// Compositions of `total` into `parts` nonnegative integers, lexicographic.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in (0..=total).rev() {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Grid search over the simplex with spacing `1 / round(1 / grid_step)`,
/// one fixed-marginal OT solve per grid point. Returns the first minimizer
/// in enumeration order.
pub fn brute_force_class_weights(
    d: &DistanceMatrix,
    class_counts: &[usize],
    grid_step: f64,
) -> Result<(ClassWeights, f64)> {
    let total: usize = class_counts.iter().sum();
    if total != d.rows() {
        return Err(Error::DimensionMismatch(format!(
            "class counts sum to {total}, distance matrix has {} rows",
            d.rows()
        )));
    }
    brute_force_class_weights_labeled(d, &labels_from_counts(class_counts), class_counts.len(), grid_step)
}

pub fn brute_force_class_weights_labeled(
    d: &DistanceMatrix,
    labels: &[usize],
    k: usize,
    grid_step: f64,
) -> Result<(ClassWeights, f64)> {
    if k > 4 {
        return Err(Error::TooManyClasses(k));
    }
    if !(grid_step > 0.0 && grid_step <= 0.5) && grid_step != 1.0 {
        return Err(Error::InvalidInput(format!("grid step {grid_step} outside (0, 0.5]")));
    }
    check_shapes(d, labels, k)?;
    let divisions = (1.0 / grid_step).round().max(1.0) as usize;
    let mut best: Option<(ClassWeights, f64)> = None;
    for point in compositions(divisions, k) {
        let w = ClassWeights::new(point.iter().map(|&c| c as f64 / divisions as f64).collect())?;
        let obj = reweighted_objective(d, labels, &w)?;
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((w, obj));
        }
    }
    Ok(best.expect("at least one grid point"))
}

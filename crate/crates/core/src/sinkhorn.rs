//! Entropic approximation of the class-weight transport problem.
//!
//! Each sweep applies three KL projections to the current plan
//! `P = exp((f_r + g_j - D_rj) / eps)`:
//!
//! 1. columns are scaled to the uniform target marginal;
//! 2. within each class, rows are scaled to the geometric mean of that
//!    class's row sums, which equalizes them while leaving the class mass free;
//! 3. the whole plan is renormalized to unit mass.
//!
//! Iterates are kept as dual potentials. While `eps` is large compared to the
//! costs the sweep runs on the Gibbs kernel directly; below
//! `1e-2 * max(D)` it switches to log-sum-exp updates. An optional geometric
//! schedule anneals `eps` down to its target every [`SCHEDULE_PERIOD`]
//! sweeps. The final plan is rounded onto the feasible set so that reported
//! objectives are costs of genuinely feasible plans.

use crate::data::{ClassWeights, TransportPlan};
use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};
use crate::select::{check_shapes, ClassWeightSolution};

pub const SCHEDULE_PERIOD: usize = 100;
const LOG_DOMAIN_BELOW: f64 = 1e-2;

/// Regularization strength, absolute or as a fraction of the mean cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Absolute(f64),
    MeanCostFraction(f64),
}

impl Epsilon {
    pub fn resolve(self, d: &DistanceMatrix) -> f64 {
        match self {
            Epsilon::Absolute(e) => e,
            Epsilon::MeanCostFraction(f) => f * d.mean(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: Epsilon,
    pub max_iters: usize,
    /// Stop once the l1 column violation and the within-class row-sum spread are both below this.
    pub tol: f64,
    /// Geometric decay of `eps` applied every [`SCHEDULE_PERIOD`] sweeps,
    /// starting from `max(eps, mean(D) / 10)`. `None` runs at the target `eps` throughout.
    pub epsilon_schedule: Option<f64>,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: Epsilon::MeanCostFraction(0.01),
            max_iters: 10_000,
            tol: 1e-7,
            epsilon_schedule: Some(0.9),
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        let eps_ok = match self.epsilon {
            Epsilon::Absolute(e) | Epsilon::MeanCostFraction(e) => e > 0.0 && e.is_finite(),
        };
        if !eps_ok {
            return Err(Error::InvalidInput(format!("epsilon must be positive, got {:?}", self.epsilon)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be at least 1".into()));
        }
        if let Some(s) = self.epsilon_schedule {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::InvalidInput(format!("epsilon schedule {s} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct State<'a> {
    d: &'a DistanceMatrix,
    members: Vec<Vec<usize>>,
    f: Vec<f64>,
    g: Vec<f64>,
    log_target: f64,
}

impl State<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.d.rows(), self.d.cols())
    }

    /// Returns the l1 column violation seen before the update.
    fn column_step_log(&mut self, eps: f64) -> f64 {
        let (n, _) = self.dims();
        let target = self.log_target.exp();
        let mut violation = 0.0;
        for j in 0..self.g.len() {
            let lse = log_sum_exp((0..n).map(|r| (self.f[r] - self.d.get(r, j)) / eps));
            violation += ((self.g[j] / eps + lse).exp() - target).abs();
            self.g[j] = eps * (self.log_target - lse);
        }
        violation
    }

    fn log_row_sums(&self, eps: f64) -> Vec<f64> {
        let (n, m) = self.dims();
        (0..n)
            .map(|r| {
                let row = self.d.row(r);
                let fr = self.f[r];
                log_sum_exp((0..m).map(|j| (fr + self.g[j] - row[j]) / eps))
            })
            .collect()
    }

    /// Geometric-mean equalization inside each class, then unit total mass.
    /// Returns the largest within-class row-sum spread seen before the update.
    fn row_step(&mut self, eps: f64, log_rows: &[f64]) -> f64 {
        let mut class_log_means = Vec::with_capacity(self.members.len());
        let mut spread: f64 = 0.0;
        for rows in &self.members {
            let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                (lo.min(log_rows[r]), hi.max(log_rows[r]))
            });
            spread = spread.max(hi.exp() - lo.exp());
            let mean = rows.iter().map(|&r| log_rows[r]).sum::<f64>() / rows.len() as f64;
            for &r in rows {
                self.f[r] += eps * (mean - log_rows[r]);
            }
            class_log_means.push((mean, rows.len()));
        }
        let log_mass = log_sum_exp(class_log_means.iter().map(|&(l, c)| l + (c as f64).ln()));
        self.f.iter_mut().for_each(|f| *f -= eps * log_mass);
        spread
    }

    /// One sweep on the Gibbs kernel `K = exp(-D / eps)`; the potentials are
    /// converted through the scalings `a = exp(f / eps)`, `b = exp(g / eps)`.
    fn sweep_kernel(&mut self, eps: f64) -> Result<(f64, f64)> {
        let (n, m) = self.dims();
        let kernel: Vec<f64> = self.d.as_slice().iter().map(|c| (-c / eps).exp()).collect();
        let a: Vec<f64> = self.f.iter().map(|f| (f / eps).exp()).collect();

        let mut ka = vec![0.0; m];
        for r in 0..n {
            let row = &kernel[r * m..(r + 1) * m];
            for (acc, k) in ka.iter_mut().zip(row) {
                *acc += a[r] * k;
            }
        }
        if let Some(j) = ka.iter().position(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(Error::NumericalUnderflow(format!("column {j} of the kernel vanished")));
        }
        let target = self.log_target.exp();
        let col_violation = ka
            .iter()
            .zip(&self.g)
            .map(|(v, g)| (v * (g / eps).exp() - target).abs())
            .sum();
        let b: Vec<f64> = ka.iter().map(|v| target / v).collect();

        let mut log_rows = vec![0.0; n];
        for r in 0..n {
            let row = &kernel[r * m..(r + 1) * m];
            let kb: f64 = row.iter().zip(&b).map(|(k, bj)| k * bj).sum();
            let s = a[r] * kb;
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::NumericalUnderflow(format!("row {r} of the kernel vanished")));
            }
            log_rows[r] = s.ln();
        }
        self.g = b.iter().map(|v| eps * v.ln()).collect();
        let spread = self.row_step(eps, &log_rows);
        Ok((col_violation, spread))
    }

    fn sweep_log(&mut self, eps: f64) -> (f64, f64) {
        let col_violation = self.column_step_log(eps);
        let log_rows = self.log_row_sums(eps);
        let spread = self.row_step(eps, &log_rows);
        (col_violation, spread)
    }

    fn plan(&self, eps: f64) -> Vec<f64> {
        let (n, m) = self.dims();
        let mut p = Vec::with_capacity(n * m);
        for r in 0..n {
            let row = self.d.row(r);
            for j in 0..m {
                p.push(((self.f[r] + self.g[j] - row[j]) / eps).exp());
            }
        }
        p
    }
}

/// Projects an approximate plan onto `{column sums = 1/m, equal row sums per class}`.
///
/// Columns are rescaled exactly, each class is assigned its mean row sum as
/// the shared row marginal, and the remaining mismatch is repaired by
/// shrinking over-full rows and columns and adding back the rank-one
/// product of the row and column deficits.
pub fn round_to_feasible(plan: &mut [f64], n: usize, m: usize, members: &[Vec<usize>]) -> Vec<f64> {
    let col_target = 1.0 / m as f64;
    let col_sums = column_sums(plan, n, m);
    for r in 0..n {
        for j in 0..m {
            if col_sums[j] > 0.0 {
                plan[r * m + j] *= col_target / col_sums[j];
            }
        }
    }
    // a vanished column gets spread uniformly over the rows
    for (j, &s) in col_sums.iter().enumerate() {
        if s <= 0.0 {
            for r in 0..n {
                plan[r * m + j] = col_target / n as f64;
            }
        }
    }

    let row_sums: Vec<f64> = plan.chunks_exact(m).map(|r| r.iter().sum()).collect();
    let mut row_target = vec![0.0; n];
    for rows in members {
        let mean = rows.iter().map(|&r| row_sums[r]).sum::<f64>() / rows.len() as f64;
        rows.iter().for_each(|&r| row_target[r] = mean);
    }

    for r in 0..n {
        if row_sums[r] > row_target[r] && row_sums[r] > 0.0 {
            let s = row_target[r] / row_sums[r];
            plan[r * m..(r + 1) * m].iter_mut().for_each(|v| *v *= s);
        }
    }
    let cols = column_sums(plan, n, m);
    for j in 0..m {
        if cols[j] > col_target {
            let s = col_target / cols[j];
            for r in 0..n {
                plan[r * m + j] *= s;
            }
        }
    }
    let row_err: Vec<f64> = plan
        .chunks_exact(m)
        .zip(&row_target)
        .map(|(row, t)| (t - row.iter().sum::<f64>()).max(0.0))
        .collect();
    let col_err: Vec<f64> = column_sums(plan, n, m).iter().map(|c| (col_target - c).max(0.0)).collect();
    let total_err: f64 = row_err.iter().sum();
    if total_err > 0.0 {
        for r in 0..n {
            if row_err[r] == 0.0 {
                continue;
            }
            for j in 0..m {
                plan[r * m + j] += row_err[r] * col_err[j] / total_err;
            }
        }
    }
    row_target
}

fn column_sums(plan: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut sums = vec![0.0; m];
    for r in 0..n {
        for (s, v) in sums.iter_mut().zip(&plan[r * m..(r + 1) * m]) {
            *s += v;
        }
    }
    sums
}

/// Approximate class weights and plan by generalized Sinkhorn scaling.
pub fn sinkhorn_class_weights(
    d: &DistanceMatrix,
    labels: &[usize],
    k: usize,
    cfg: &SinkhornConfig,
) -> Result<ClassWeightSolution> {
    cfg.validate()?;
    let counts = check_shapes(d, labels, k)?;
    let (n, m) = (d.rows(), d.cols());
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (r, &l) in labels.iter().enumerate() {
        members[l].push(r);
    }

    let eps_target = cfg.epsilon.resolve(d);
    if !(eps_target > 0.0) {
        return Err(Error::InvalidInput(
            "epsilon resolves to zero (all distances are zero?)".into(),
        ));
    }
    let mut eps = match cfg.epsilon_schedule {
        Some(_) => eps_target.max(d.mean() / 10.0),
        None => eps_target,
    };
    let log_domain_cutoff = LOG_DOMAIN_BELOW * d.max();

    let mut state = State {
        d,
        members,
        f: vec![0.0; n],
        g: vec![0.0; m],
        log_target: -(m as f64).ln(),
    };

    let mut iters = 0;
    let mut converged = false;
    let mut violation = (f64::INFINITY, f64::INFINITY);
    while iters < cfg.max_iters {
        let measured = if eps < log_domain_cutoff {
            state.sweep_log(eps)
        } else {
            state.sweep_kernel(eps)?
        };
        iters += 1;
        if let Some(decay) = cfg.epsilon_schedule {
            if iters % SCHEDULE_PERIOD == 0 && eps > eps_target {
                eps = (eps * decay).max(eps_target);
            }
        }
        if eps <= eps_target {
            violation = measured;
            if violation.0 <= cfg.tol && violation.1 <= cfg.tol {
                converged = true;
                break;
            }
        }
    }
    if !converged && eps <= eps_target {
        // accept a near miss; flag only genuine non-convergence
        converged = violation.0 <= 10.0 * cfg.tol && violation.1 <= 10.0 * cfg.tol;
    }

    let mut plan = state.plan(eps);
    let row_target = round_to_feasible(&mut plan, n, m, &state.members);
    let weights: Vec<f64> = state
        .members
        .iter()
        .zip(&counts)
        .map(|(rows, &c)| row_target[rows[0]] * c as f64)
        .collect();
    let total: f64 = weights.iter().sum();
    let weights = ClassWeights::new(weights.iter().map(|w| w / total).collect())?;
    let objective: f64 = plan.iter().zip(d.as_slice()).map(|(p, c)| p * c).sum();
    let support_size = weights.support().len();
    Ok(ClassWeightSolution {
        plan: TransportPlan {
            rows: n,
            cols: m,
            plan,
            source_marginal: row_target,
            target_marginal: vec![1.0 / m as f64; m],
            objective,
        },
        weights,
        objective,
        support_size,
        duality_gap: None,
        iterations: iters,
        converged,
    })
}

//! Dense revised simplex for standard-form linear programs
//! `min c.x  s.t.  A x = b, x >= 0` with sparse columns.
//!
//! The basis inverse is kept explicitly and updated with a rank-one pivot;
//! it is rebuilt by Gauss-Jordan elimination whenever the primal residual
//! drifts, and once more before optimality is declared. Pricing is
//! Dantzig's rule, switching to Bland's rule while degenerate pivots keep
//! repeating. Without a starting basis a phase-one problem with artificial
//! columns is solved first; redundant equality rows keep their artificial
//! at zero for the rest of the solve.

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
const RESIDUAL_CHECK_EVERY: usize = 64;
const RESIDUAL_TOL: f64 = 1e-10;

/// Sparse column: `(row, coefficient)` pairs.
pub type Column = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
pub struct StandardLp {
    rows: usize,
    rhs: Vec<f64>,
    columns: Vec<Column>,
    costs: Vec<f64>,
}

impl StandardLp {
    pub fn new(rhs: Vec<f64>) -> Self {
        StandardLp {
            rows: rhs.len(),
            rhs,
            columns: Vec::new(),
            costs: Vec::new(),
        }
    }

    /// Appends a nonnegative variable and returns its index.
    pub fn add_column(&mut self, cost: f64, entries: Column) -> usize {
        debug_assert!(entries.iter().all(|&(r, _)| r < self.rows));
        self.columns.push(entries);
        self.costs.push(cost);
        self.columns.len() - 1
    }

    pub fn num_rows(&self) -> usize {
        self.rows
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn cost(&self, j: usize) -> f64 {
        self.costs[j]
    }

    pub fn column(&self, j: usize) -> &Column {
        &self.columns[j]
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    /// Simplex multipliers `y = c_B B^-1`; reduced costs are `c - A^T y`.
    pub duals: Vec<f64>,
    pub objective: f64,
    pub basis: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LpOptions {
    pub max_iterations: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        LpOptions {
            max_iterations: 2_000_000,
        }
    }
}

struct Tableau<'a> {
    lp: &'a StandardLp,
    /// Extra identity-like columns used in phase one (`sign * e_i`).
    artificial_sign: Vec<f64>,
    n_real: usize,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    /// Row-major `rows x rows` basis inverse.
    binv: Vec<f64>,
    x_basic: Vec<f64>,
    iterations: usize,
}

enum Step {
    Optimal,
    Pivoted { degenerate: bool },
}

impl<'a> Tableau<'a> {
    fn rows(&self) -> usize {
        self.lp.rows
    }

    fn column_entries(&self, j: usize, out: &mut Column) {
        out.clear();
        if j < self.n_real {
            out.extend_from_slice(&self.lp.columns[j]);
        } else {
            let i = j - self.n_real;
            out.push((i, self.artificial_sign[i]));
        }
    }

    fn refactor(&mut self) -> Result<()> {
        let n = self.rows();
        let mut b = vec![0.0; n * n];
        let mut col = Column::new();
        for (p, &j) in self.basis.iter().enumerate() {
            self.column_entries(j, &mut col);
            for &(i, a) in &col {
                b[i * n + p] = a;
            }
        }
        self.binv = invert(&mut b, n)?;
        self.recompute_primal();
        Ok(())
    }

    fn recompute_primal(&mut self) {
        let n = self.rows();
        for i in 0..n {
            let row = &self.binv[i * n..(i + 1) * n];
            self.x_basic[i] = row.iter().zip(&self.lp.rhs).map(|(a, b)| a * b).sum();
        }
    }

    fn residual(&self) -> f64 {
        let mut r = self.lp.rhs.clone();
        let mut col = Column::new();
        for (p, &j) in self.basis.iter().enumerate() {
            self.column_entries(j, &mut col);
            for &(i, a) in &col {
                r[i] -= a * self.x_basic[p];
            }
        }
        r.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    fn duals(&self, costs: &dyn Fn(usize) -> f64) -> Vec<f64> {
        let n = self.rows();
        let mut y = vec![0.0; n];
        for (p, &j) in self.basis.iter().enumerate() {
            let c = costs(j);
            if c != 0.0 {
                let row = &self.binv[p * n..(p + 1) * n];
                for (yi, b) in y.iter_mut().zip(row) {
                    *yi += c * b;
                }
            }
        }
        y
    }

    fn reduced_cost(&self, j: usize, cost: f64, y: &[f64]) -> f64 {
        if j < self.n_real {
            cost - self.lp.columns[j].iter().map(|&(i, a)| a * y[i]).sum::<f64>()
        } else {
            let i = j - self.n_real;
            cost - self.artificial_sign[i] * y[i]
        }
    }

    /// One pricing + ratio test + pivot.
    fn step(
        &mut self,
        costs: &dyn Fn(usize) -> f64,
        may_enter: &dyn Fn(usize) -> bool,
        bland: bool,
        opt_tol: f64,
    ) -> Result<Step> {
        let n = self.rows();
        let y = self.duals(costs);
        let total = self.n_real + self.artificial_sign.len();

        let mut entering = None;
        let mut best = -opt_tol;
        for j in 0..total {
            if self.is_basic[j] || !may_enter(j) {
                continue;
            }
            let d = self.reduced_cost(j, costs(j), &y);
            if d < best {
                entering = Some(j);
                if bland {
                    break;
                }
                best = d;
            }
        }
        let Some(q) = entering else {
            return Ok(Step::Optimal);
        };

        let mut col = Column::new();
        self.column_entries(q, &mut col);
        let mut alpha = vec![0.0; n];
        for (i, a) in alpha.iter_mut().enumerate() {
            let row = &self.binv[i * n..(i + 1) * n];
            *a = col.iter().map(|&(k, v)| row[k] * v).sum();
        }

        let mut leave: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for i in 0..n {
            if alpha[i] <= PIVOT_TOL {
                continue;
            }
            let ratio = self.x_basic[i].max(0.0) / alpha[i];
            let better = match leave {
                None => true,
                Some(l) => {
                    let tie = (ratio - best_ratio).abs() <= 1e-12 * (1.0 + best_ratio.abs());
                    if tie {
                        if bland {
                            self.basis[i] < self.basis[l]
                        } else {
                            alpha[i] > alpha[l]
                        }
                    } else {
                        ratio < best_ratio
                    }
                }
            };
            if better {
                leave = Some(i);
                best_ratio = ratio;
            }
        }
        let Some(p) = leave else {
            return Err(Error::SolverFailure("linear program is unbounded".into()));
        };
        let theta = best_ratio;

        for i in 0..n {
            if i != p {
                self.x_basic[i] -= theta * alpha[i];
            }
        }
        self.x_basic[p] = theta;

        let pivot = alpha[p];
        let (before, rest) = self.binv.split_at_mut(p * n);
        let (prow, after) = rest.split_at_mut(n);
        prow.iter_mut().for_each(|v| *v /= pivot);
        for (i, row) in before
            .chunks_exact_mut(n)
            .enumerate()
            .chain(after.chunks_exact_mut(n).enumerate().map(|(k, r)| (p + 1 + k, r)))
        {
            let f = alpha[i];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * pv;
                }
            }
        }

        let old = self.basis[p];
        self.is_basic[old] = false;
        self.is_basic[q] = true;
        self.basis[p] = q;
        self.iterations += 1;
        Ok(Step::Pivoted {
            degenerate: theta <= 1e-14,
        })
    }

    fn run(
        &mut self,
        costs: &dyn Fn(usize) -> f64,
        may_enter: &dyn Fn(usize) -> bool,
        opt_tol: f64,
        options: &LpOptions,
    ) -> Result<()> {
        let mut bland = false;
        let mut degenerate_run = 0usize;
        let mut since_check = 0usize;
        let patience = self.rows().max(50);
        loop {
            if self.iterations >= options.max_iterations {
                return Err(Error::SolverFailure(format!(
                    "simplex hit the iteration cap of {}",
                    options.max_iterations
                )));
            }
            match self.step(costs, may_enter, bland, opt_tol)? {
                Step::Optimal => {
                    // confirm against a fresh factorization before stopping
                    self.refactor()?;
                    match self.step(costs, may_enter, bland, opt_tol)? {
                        Step::Optimal => return Ok(()),
                        Step::Pivoted { .. } => continue,
                    }
                }
                Step::Pivoted { degenerate } => {
                    if degenerate {
                        degenerate_run += 1;
                        if degenerate_run > patience {
                            bland = true;
                        }
                    } else {
                        degenerate_run = 0;
                        bland = false;
                    }
                }
            }
            since_check += 1;
            if since_check >= RESIDUAL_CHECK_EVERY {
                since_check = 0;
                if self.residual() > RESIDUAL_TOL {
                    self.refactor()?;
                }
            }
        }
    }
}

/// Gauss-Jordan inverse with partial pivoting of a row-major `n x n` matrix
/// (consumed as scratch).
fn invert(a: &mut [f64], n: usize) -> Result<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for c in 0..n {
        let (mut piv, mut best) = (c, a[c * n + c].abs());
        for r in c + 1..n {
            let v = a[r * n + c].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-12 {
            return Err(Error::SolverFailure("singular basis matrix".into()));
        }
        if piv != c {
            for k in 0..n {
                a.swap(c * n + k, piv * n + k);
                inv.swap(c * n + k, piv * n + k);
            }
        }
        let d = a[c * n + c];
        for k in 0..n {
            a[c * n + k] /= d;
            inv[c * n + k] /= d;
        }
        for r in 0..n {
            if r == c {
                continue;
            }
            let f = a[r * n + c];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                a[r * n + k] -= f * a[c * n + k];
                inv[r * n + k] -= f * inv[c * n + k];
            }
        }
    }
    Ok(inv)
}

/// Solves `lp`. A supplied `initial_basis` must be nonsingular and primal
/// feasible; otherwise phase one is run from an artificial basis.
pub fn solve(lp: &StandardLp, initial_basis: Option<&[usize]>, options: &LpOptions) -> Result<LpSolution> {
    let rows = lp.rows;
    let n_real = lp.columns.len();
    let cmax = lp.costs.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let opt_tol = 1e-11 * cmax.max(1.0);

    let mut t = Tableau {
        lp,
        artificial_sign: Vec::new(),
        n_real,
        basis: Vec::new(),
        is_basic: Vec::new(),
        binv: Vec::new(),
        x_basic: vec![0.0; rows],
        iterations: 0,
    };

    match initial_basis {
        Some(basis) => {
            if basis.len() != rows || basis.iter().any(|&j| j >= n_real) {
                return Err(Error::InvalidInput("initial basis has the wrong shape".into()));
            }
            t.basis = basis.to_vec();
            t.is_basic = vec![false; n_real];
            for &j in basis {
                t.is_basic[j] = true;
            }
            t.refactor()?;
            if let Some(i) = t.x_basic.iter().position(|&v| v < -FEAS_TOL) {
                return Err(Error::InvalidInput(format!(
                    "initial basis is infeasible at row {i} ({})",
                    t.x_basic[i]
                )));
            }
        }
        None => {
            t.artificial_sign = lp.rhs.iter().map(|&b| if b < 0.0 { -1.0 } else { 1.0 }).collect();
            t.basis = (n_real..n_real + rows).collect();
            t.is_basic = vec![false; n_real + rows];
            for j in n_real..n_real + rows {
                t.is_basic[j] = true;
            }
            t.binv = vec![0.0; rows * rows];
            for i in 0..rows {
                t.binv[i * rows + i] = t.artificial_sign[i];
            }
            t.recompute_primal();

            let phase_one_cost = |j: usize| if j >= n_real { 1.0 } else { 0.0 };
            t.run(&phase_one_cost, &|_| true, 1e-11, options)?;
            let infeasibility: f64 = t
                .basis
                .iter()
                .zip(&t.x_basic)
                .filter(|(&j, _)| j >= n_real)
                .map(|(_, &x)| x)
                .sum();
            if infeasibility > 1e-8 * (1.0 + lp.rhs.iter().map(|b| b.abs()).sum::<f64>()) {
                return Err(Error::SolverFailure(format!(
                    "linear program is infeasible (phase-one residual {infeasibility:e})"
                )));
            }
            drive_out_artificials(&mut t)?;
        }
    }

    let costs = |j: usize| if j < n_real { lp.costs[j] } else { 0.0 };
    t.run(&costs, &|j| j < n_real, opt_tol, options)?;

    let mut x = vec![0.0; n_real];
    for (p, &j) in t.basis.iter().enumerate() {
        if j < n_real {
            x[j] = t.x_basic[p].max(0.0);
        }
    }
    let objective = x.iter().zip(&lp.costs).map(|(a, c)| a * c).sum();
    let duals = t.duals(&costs);
    Ok(LpSolution {
        x,
        duals,
        objective,
        basis: t.basis.clone(),
        iterations: t.iterations,
    })
}

/// Pivots zero-level artificials out of the basis wherever some real column
/// can replace them. Rows where none can are redundant.
fn drive_out_artificials(t: &mut Tableau<'_>) -> Result<()> {
    let n = t.rows();
    for p in 0..n {
        if t.basis[p] < t.n_real {
            continue;
        }
        let row: Vec<f64> = t.binv[p * n..(p + 1) * n].to_vec();
        let candidate = (0..t.n_real).find(|&j| {
            !t.is_basic[j] && t.lp.columns[j].iter().map(|&(i, a)| row[i] * a).sum::<f64>().abs() > 1e-7
        });
        let Some(q) = candidate else { continue };
        let mut alpha = vec![0.0; n];
        for (i, a) in alpha.iter_mut().enumerate() {
            let r = &t.binv[i * n..(i + 1) * n];
            *a = t.lp.columns[q].iter().map(|&(k, v)| r[k] * v).sum();
        }
        let pivot = alpha[p];
        let prow: Vec<f64> = t.binv[p * n..(p + 1) * n].iter().map(|v| v / pivot).collect();
        for i in 0..n {
            let dst = &mut t.binv[i * n..(i + 1) * n];
            if i == p {
                dst.copy_from_slice(&prow);
            } else if alpha[i] != 0.0 {
                for (v, pv) in dst.iter_mut().zip(&prow) {
                    *v -= alpha[i] * pv;
                }
            }
        }
        let old = t.basis[p];
        t.is_basic[old] = false;
        t.is_basic[q] = true;
        t.basis[p] = q;
    }
    t.refactor()
}

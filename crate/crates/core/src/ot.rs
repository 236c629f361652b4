//! Exact discrete optimal transport.
//!
//! [`solve_exact_ot`] runs the primal transportation simplex: a northwest
//! corner start, a spanning-tree basis of `n + m - 1` cells, node potentials
//! recomputed from the tree after every pivot, block pricing, and a fallback
//! to Bland's rule while a run of degenerate pivots lasts. The returned
//! [`OtSolution`] carries a dual certificate built from the final potentials.

use std::collections::HashMap;

use crate::data::{DiscreteJointDistribution, TransportPlan, SIMPLEX_SUM_TOL};
use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};

/// Relative duality-gap bound every exact solve must certify.
pub const GAP_TOL: f64 = 1e-7;

/// Discrete transport problem with fixed marginals.
#[derive(Debug, Clone)]
pub struct OtProblem<'a> {
    cost: &'a DistanceMatrix,
    mu: Vec<f64>,
    nu: Vec<f64>,
}

impl<'a> OtProblem<'a> {
    pub fn new(cost: &'a DistanceMatrix, mu: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        if mu.len() != cost.rows() || nu.len() != cost.cols() {
            return Err(Error::DimensionMismatch(format!(
                "marginals of length {}/{} for a {}x{} cost",
                mu.len(),
                nu.len(),
                cost.rows(),
                cost.cols()
            )));
        }
        for (name, v) in [("mu", &mu), ("nu", &nu)] {
            if let Some(i) = v.iter().position(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::InvalidInput(format!("{name}[{i}] = {}", v[i])));
            }
        }
        let (sm, sn): (f64, f64) = (mu.iter().sum(), nu.iter().sum());
        if (sm - 1.0).abs() > SIMPLEX_SUM_TOL || (sn - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::InfeasibleMarginals {
                source_mass: sm,
                target_mass: sn,
            });
        }
        Ok(OtProblem { cost, mu, nu })
    }

    /// Uniform marginals on both sides.
    pub fn uniform(cost: &'a DistanceMatrix) -> Self {
        let (n, m) = (cost.rows(), cost.cols());
        OtProblem {
            cost,
            mu: vec![1.0 / n as f64; n],
            nu: vec![1.0 / m as f64; m],
        }
    }

    pub fn cost(&self) -> &DistanceMatrix {
        self.cost
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }
}

#[derive(Debug, Clone)]
pub struct OtSolution {
    pub plan: TransportPlan,
    /// Dual potentials; `col_potentials` is the c-transform of
    /// `row_potentials`, so the pair is dual feasible by construction.
    pub row_potentials: Vec<f64>,
    pub col_potentials: Vec<f64>,
    pub dual_objective: f64,
    pub duality_gap: f64,
    pub pivots: usize,
}

impl OtSolution {
    pub fn objective(&self) -> f64 {
        self.plan.objective
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    row: usize,
    col: usize,
    flow: f64,
}

struct TreeBasis<'a> {
    cost: &'a DistanceMatrix,
    n: usize,
    m: usize,
    cells: Vec<Cell>,
    /// Basis cell indices incident to each node; rows are `0..n`, columns `n..n+m`.
    adjacency: Vec<Vec<usize>>,
    u: Vec<f64>,
    v: Vec<f64>,
    // scratch for tree walks
    parent_edge: Vec<usize>,
    stamp: Vec<u32>,
    epoch: u32,
    queue: Vec<usize>,
}

const NO_EDGE: usize = usize::MAX;

impl<'a> TreeBasis<'a> {
    fn northwest(cost: &'a DistanceMatrix, mu: &[f64], nu: &[f64]) -> Self {
        let (n, m) = (mu.len(), nu.len());
        let mut supply = mu.to_vec();
        let mut demand = nu.to_vec();
        let mut cells = Vec::with_capacity(n + m - 1);
        let (mut i, mut j) = (0, 0);
        while i < n && j < m {
            let x = supply[i].min(demand[j]);
            cells.push(Cell {
                row: i,
                col: j,
                flow: x,
            });
            supply[i] -= x;
            demand[j] -= x;
            if i == n - 1 {
                j += 1;
            } else if j == m - 1 || supply[i] <= demand[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(cells.len(), n + m - 1);
        let mut adjacency = vec![Vec::new(); n + m];
        for (idx, c) in cells.iter().enumerate() {
            adjacency[c.row].push(idx);
            adjacency[n + c.col].push(idx);
        }
        TreeBasis {
            cost,
            n,
            m,
            cells,
            adjacency,
            u: vec![0.0; n],
            v: vec![0.0; m],
            parent_edge: vec![NO_EDGE; n + m],
            stamp: vec![0; n + m],
            epoch: 0,
            queue: Vec::with_capacity(n + m),
        }
    }

    fn other_end(&self, edge: usize, node: usize) -> usize {
        let c = self.cells[edge];
        if node < self.n {
            self.n + c.col
        } else {
            c.row
        }
    }

    fn next_epoch(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.epoch = 1;
        }
    }

    /// Breadth-first walk from `root` recording the tree edge used to reach every node.
    fn walk_from(&mut self, root: usize, stop_at: Option<usize>) {
        self.next_epoch();
        self.queue.clear();
        self.queue.push(root);
        self.stamp[root] = self.epoch;
        self.parent_edge[root] = NO_EDGE;
        let mut head = 0;
        while head < self.queue.len() {
            let node = self.queue[head];
            head += 1;
            if Some(node) == stop_at {
                return;
            }
            for k in 0..self.adjacency[node].len() {
                let e = self.adjacency[node][k];
                let next = self.other_end(e, node);
                if self.stamp[next] != self.epoch {
                    self.stamp[next] = self.epoch;
                    self.parent_edge[next] = e;
                    self.queue.push(next);
                }
            }
        }
    }

    fn compute_potentials(&mut self) {
        self.walk_from(0, None);
        self.u[0] = 0.0;
        // queue holds BFS order; every node's parent precedes it
        for idx in 1..self.queue.len() {
            let node = self.queue[idx];
            let c = self.cells[self.parent_edge[node]];
            let cost = self.cost.get(c.row, c.col);
            if node < self.n {
                self.u[node] = cost - self.v[c.col];
            } else {
                self.v[node - self.n] = cost - self.u[c.row];
            }
        }
    }

    #[inline]
    fn reduced_cost(&self, r: usize, c: usize) -> f64 {
        self.cost.get(r, c) - self.u[r] - self.v[c]
    }

    /// Tree path from row `r` to column `c`, as basis edges ordered from the row side.
    fn path(&mut self, r: usize, c: usize) -> Vec<usize> {
        let target = self.n + c;
        self.walk_from(r, Some(target));
        let mut edges = Vec::new();
        let mut node = target;
        while node != r {
            let e = self.parent_edge[node];
            edges.push(e);
            node = self.other_end(e, node);
        }
        edges.reverse();
        edges
    }

    fn replace(&mut self, leaving: usize, entering: Cell) {
        let old = self.cells[leaving];
        for node in [old.row, self.n + old.col] {
            let list = &mut self.adjacency[node];
            let pos = list.iter().position(|&e| e == leaving).expect("edge in adjacency");
            list.swap_remove(pos);
        }
        self.cells[leaving] = entering;
        self.adjacency[entering.row].push(leaving);
        self.adjacency[self.n + entering.col].push(leaving);
    }
}

enum Pricing {
    Block { next: usize, block: usize },
    Bland,
}

fn find_entering(basis: &TreeBasis<'_>, pricing: &mut Pricing, tol: f64) -> Option<(usize, usize)> {
    let (n, m) = (basis.n, basis.m);
    let total = n * m;
    match pricing {
        Pricing::Bland => {
            for idx in 0..total {
                let (r, c) = (idx / m, idx % m);
                if basis.reduced_cost(r, c) < -tol {
                    return Some((r, c));
                }
            }
            None
        }
        Pricing::Block { next, block } => {
            let mut best = -tol;
            let mut best_idx = None;
            let mut scanned = 0;
            let mut idx = *next;
            while scanned < total {
                let stop = (scanned + *block).min(total);
                while scanned < stop {
                    let rc = basis.reduced_cost(idx / m, idx % m);
                    if rc < best {
                        best = rc;
                        best_idx = Some(idx);
                    }
                    idx += 1;
                    if idx == total {
                        idx = 0;
                    }
                    scanned += 1;
                }
                if best_idx.is_some() {
                    break;
                }
            }
            *next = idx;
            best_idx.map(|i| (i / m, i % m))
        }
    }
}

/// Optimal coupling for `problem` with a duality-gap certificate.
pub fn solve_exact_ot(problem: &OtProblem<'_>) -> Result<OtSolution> {
    let cost = problem.cost;
    let (n, m) = (cost.rows(), cost.cols());
    let cmax = cost.max();
    let tol = 1e-11 * cmax.max(1.0);
    let max_pivots = 1_000_000usize.max(50 * n * m);
    let block = ((n * m) as f64).sqrt().ceil().max(64.0) as usize;

    let mut basis = TreeBasis::northwest(cost, &problem.mu, &problem.nu);
    let mut pricing = Pricing::Block { next: 0, block };
    let mut degenerate_run = 0usize;
    let mut pivots = 0usize;

    basis.compute_potentials();
    loop {
        let Some((r, c)) = find_entering(&basis, &mut pricing, tol) else {
            break;
        };
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::SolverFailure(format!(
                "transportation simplex exceeded {max_pivots} pivots"
            )));
        }

        let path = basis.path(r, c);
        debug_assert!(path.len() % 2 == 1);
        let bland = matches!(pricing, Pricing::Bland);
        let mut theta = f64::INFINITY;
        let mut leaving = NO_EDGE;
        for &e in path.iter().step_by(2) {
            let f = basis.cells[e].flow;
            if f < theta || (bland && f == theta && e < leaving) {
                theta = f;
                leaving = e;
            }
        }
        let theta = theta.max(0.0);
        for (k, &e) in path.iter().enumerate() {
            let cell = &mut basis.cells[e];
            if k % 2 == 0 {
                cell.flow = (cell.flow - theta).max(0.0);
            } else {
                cell.flow += theta;
            }
        }
        basis.replace(
            leaving,
            Cell {
                row: r,
                col: c,
                flow: theta,
            },
        );
        basis.compute_potentials();

        if theta > 0.0 {
            degenerate_run = 0;
            if bland {
                pricing = Pricing::Block { next: 0, block };
            }
        } else {
            degenerate_run += 1;
            if degenerate_run > n + m && !bland {
                pricing = Pricing::Bland;
            }
        }
    }

    let mut plan = vec![0.0; n * m];
    for cell in &basis.cells {
        plan[cell.row * m + cell.col] += cell.flow;
    }
    let objective: f64 = plan.iter().zip(cost.as_slice()).map(|(p, c)| p * c).sum();

    let u = basis.u.clone();
    let v: Vec<f64> = (0..m)
        .map(|j| {
            (0..n)
                .map(|i| cost.get(i, j) - u[i])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let dual_objective: f64 = problem.mu.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
        + problem.nu.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    let duality_gap = objective - dual_objective;
    if duality_gap > GAP_TOL * (1.0 + objective.abs()) {
        return Err(Error::SolverFailure(format!(
            "duality gap {duality_gap:e} above tolerance at objective {objective}"
        )));
    }

    Ok(OtSolution {
        plan: TransportPlan {
            rows: n,
            cols: m,
            plan,
            source_marginal: problem.mu.clone(),
            target_marginal: problem.nu.clone(),
            objective,
        },
        row_potentials: u,
        col_potentials: v,
        dual_objective,
        duality_gap,
        pivots,
    })
}

/// Convenience: exact W1 with uniform marginals.
pub fn wasserstein_uniform(cost: &DistanceMatrix) -> Result<f64> {
    Ok(solve_exact_ot(&OtProblem::uniform(cost))?.objective())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_dims(p: &DiscreteJointDistribution, q: &DiscreteJointDistribution) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch(format!(
            "joint distributions over {} and {} features",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// Ground cost matrix between the atoms of two joint distributions:
/// `|z - z'|_2 + label_cost * [y != y']`.
pub fn joint_cost_matrix(
    p: &DiscreteJointDistribution,
    q: &DiscreteJointDistribution,
    label_cost: f64,
) -> Result<DistanceMatrix> {
    check_dims(p, q)?;
    if !(label_cost >= 0.0) || !label_cost.is_finite() {
        return Err(Error::InvalidInput(format!("label cost {label_cost}")));
    }
    let mut values = Vec::with_capacity(p.atoms().len() * q.atoms().len());
    for a in p.atoms() {
        for b in q.atoms() {
            let label = if a.label == b.label { 0.0 } else { label_cost };
            values.push(euclid(&a.feature, &b.feature) + label);
        }
    }
    DistanceMatrix::from_values(p.atoms().len(), q.atoms().len(), values)
}

/// W1 between joint distributions over features x labels.
pub fn joint_wasserstein(
    p: &DiscreteJointDistribution,
    q: &DiscreteJointDistribution,
    label_cost: f64,
) -> Result<f64> {
    let cost = joint_cost_matrix(p, q, label_cost)?;
    let problem = OtProblem::new(&cost, p.masses(), q.masses())?;
    Ok(solve_exact_ot(&problem)?.objective())
}

/// W1 between the feature marginals of two joint distributions.
pub fn feature_marginal_wasserstein(
    p: &DiscreteJointDistribution,
    q: &DiscreteJointDistribution,
) -> Result<f64> {
    check_dims(p, q)?;
    let values = p
        .atoms()
        .iter()
        .flat_map(|a| q.atoms().iter().map(move |b| euclid(&a.feature, &b.feature)))
        .collect();
    let cost = DistanceMatrix::from_values(p.atoms().len(), q.atoms().len(), values)?;
    let problem = OtProblem::new(&cost, p.masses(), q.masses())?;
    Ok(solve_exact_ot(&problem)?.objective())
}

/// Which feature marginal the conditional term is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Source,
    Target,
}

type FeatureKey = Vec<u64>;

fn feature_key(z: &[f64]) -> FeatureKey {
    // +0.0 folds -0.0 onto 0.0 so equal vectors share a key
    z.iter().map(|v| (v + 0.0).to_bits()).collect()
}

struct Conditionals {
    order: Vec<FeatureKey>,
    mass: HashMap<FeatureKey, f64>,
    labels: HashMap<FeatureKey, Vec<(u64, f64)>>,
}

fn group_by_feature(p: &DiscreteJointDistribution) -> Conditionals {
    let mut order = Vec::new();
    let mut mass: HashMap<FeatureKey, f64> = HashMap::new();
    let mut labels: HashMap<FeatureKey, Vec<(u64, f64)>> = HashMap::new();
    for atom in p.atoms().iter().filter(|a| a.mass > 0.0) {
        let key = feature_key(&atom.feature);
        if !mass.contains_key(&key) {
            order.push(key.clone());
        }
        *mass.entry(key.clone()).or_insert(0.0) += atom.mass;
        let entry = labels.entry(key).or_default();
        match entry.iter_mut().find(|(l, _)| *l == atom.label) {
            Some((_, m)) => *m += atom.mass,
            None => entry.push((atom.label, atom.mass)),
        }
    }
    Conditionals { order, mass, labels }
}

/// W1 between two label distributions under the 0-1 label metric, solved as
/// an exact transport problem on the union of their labels.
fn label_wasserstein(a: &[(u64, f64)], a_total: f64, b: &[(u64, f64)], b_total: f64) -> Result<f64> {
    let mut support: Vec<u64> = a.iter().chain(b).map(|(l, _)| *l).collect();
    support.sort_unstable();
    support.dedup();
    let dist = |entries: &[(u64, f64)], total: f64| -> Vec<f64> {
        support
            .iter()
            .map(|l| entries.iter().find(|(x, _)| x == l).map_or(0.0, |(_, m)| m / total))
            .collect()
    };
    let (mu, nu) = (dist(a, a_total), dist(b, b_total));
    let k = support.len();
    let values = (0..k * k).map(|idx| if idx / k == idx % k { 0.0 } else { 1.0 }).collect();
    let cost = DistanceMatrix::from_values(k, k, values)?;
    let problem = OtProblem::new(&cost, mu, nu)?;
    Ok(solve_exact_ot(&problem)?.objective())
}

/// `E_{z ~ weighting marginal} W1(p(Y|z), q(Y|z))` with the 0-1 label metric.
/// Features are grouped by exact equality.
pub fn conditional_wasserstein_term(
    p: &DiscreteJointDistribution,
    q: &DiscreteJointDistribution,
    weighting: Weighting,
) -> Result<f64> {
    check_dims(p, q)?;
    let gp = group_by_feature(p);
    let gq = group_by_feature(q);
    let outer = match weighting {
        Weighting::Source => &gp,
        Weighting::Target => &gq,
    };
    let mut total = 0.0;
    for key in &outer.order {
        let (Some(&mp), Some(&mq)) = (gp.mass.get(key), gq.mass.get(key)) else {
            return Err(Error::SupportMismatch);
        };
        let w1 = label_wasserstein(&gp.labels[key], mp, &gq.labels[key], mq)?;
        total += outer.mass[key] * w1;
    }
    Ok(total)
}

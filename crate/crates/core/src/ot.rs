//! Entropic optimal transport between class prototypes and a batch of samples.
//!
//! [`solve_sinkhorn`] runs log-domain Sinkhorn-Knopp scaling on
//! `min ⟨γ, C⟩ + ε·KL(γ ‖ μ_row ⊗ μ_col)`. [`solve_exact_lp`] solves the
//! unregularized problem on tiny instances by enumerating every vertex of the
//! transportation polytope; it exists to check the Sinkhorn solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Solver settings shared by every per-batch transport problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    /// Reserved for relaxed-marginal transport. Only `false` is supported.
    pub unbalanced: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.05,
            max_iters: 1000,
            tolerance: 1e-6,
            unbalanced: false,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "entropic regularization must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be positive".into()));
        }
        if self.unbalanced {
            return Err(Error::InvalidArgument(
                "unbalanced transport is not implemented".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TransportProblem {
    pub cost: Matrix,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub epsilon: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl TransportProblem {
    /// Problem with uniform marginals on both sides.
    pub fn uniform(cost: Matrix, cfg: &SinkhornConfig) -> Self {
        let (k, m) = cost.shape();
        TransportProblem {
            cost,
            row_marginal: vec![1.0 / k as f64; k],
            col_marginal: vec![1.0 / m as f64; m],
            epsilon: cfg.epsilon,
            max_iters: cfg.max_iters,
            tolerance: cfg.tolerance,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "entropic regularization must be positive, got {}",
                self.epsilon
            )));
        }
        self.cost.ensure_finite("transport cost")?;
        validate_marginals(&self.cost, &self.row_marginal, &self.col_marginal)
    }
}

fn validate_marginals(cost: &Matrix, row: &[f64], col: &[f64]) -> Result<()> {
    let (k, m) = cost.shape();
    if k == 0 || m == 0 {
        return Err(Error::Degenerate("empty transport problem".into()));
    }
    if row.len() != k || col.len() != m {
        return Err(Error::shape(
            "transport marginals",
            format!("{k} and {m}"),
            format!("{} and {}", row.len(), col.len()),
        ));
    }
    for (name, mu) in [("row", row), ("column", col)] {
        if mu.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "{name} marginal must be strictly positive"
            )));
        }
        let total: f64 = mu.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Degenerate(format!(
                "{name} marginal sums to {total}, expected 1"
            )));
        }
    }
    Ok(())
}

/// A coupling together with how well it meets its marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub row_residual: f64,
    pub col_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl TransportPlan {
    pub fn max_residual(&self) -> f64 {
        self.row_residual.max(self.col_residual)
    }

    /// Transport cost `⟨γ, C⟩_F`.
    pub fn cost(&self, cost: &Matrix) -> Result<f64> {
        linalg::frobenius_inner(&self.plan, cost)
    }

    /// Class index receiving the most mass from sample `j`; ties go to the lowest class.
    pub fn column_argmax(&self, j: usize) -> Result<usize> {
        plan_column_argmax(self, j)
    }
}

/// `C[i, j] = 1 − c_iᵀ f_j` for unit-norm prototypes `c` (K×d) and features `f` (M×d).
pub fn build_cost_matrix(prototypes: &Matrix, features: &Matrix) -> Result<Matrix> {
    if prototypes.cols() != features.cols() {
        return Err(Error::shape(
            "build_cost_matrix",
            format!("feature dim {}", prototypes.cols()),
            format!("feature dim {}", features.cols()),
        ));
    }
    let sims = prototypes.matmul_t(features)?;
    // rounding can push |cᵀf| a hair past 1
    Ok(sims.map(|s| (1.0 - s).clamp(0.0, 2.0)))
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-iteration shrink factor of the regularization while annealing.
const ANNEAL_FACTOR: f64 = 0.9;

/// Log-domain Sinkhorn-Knopp with epsilon scaling: the first iterations run
/// at a geometrically shrinking regularization, warm-starting the potentials,
/// and the rest at `epsilon` itself. The fixed point is unchanged; degenerate
/// instances that stall at small `epsilon` from a cold start converge quickly.
/// Never errors on slow convergence: the best iterate at the target
/// `epsilon` is returned with `converged = false`.
pub fn solve_sinkhorn(problem: &TransportProblem) -> Result<TransportPlan> {
    problem.validate()?;
    let TransportProblem {
        cost,
        row_marginal: mu,
        col_marginal: nu,
        epsilon: target,
        ..
    } = problem;
    let target = *target;
    let (k, m) = cost.shape();
    let log_mu: Vec<f64> = mu.iter().map(|v| v.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|v| v.ln()).collect();

    let max_iters = problem.max_iters.max(1);
    let spread = cost.data().iter().fold(0.0f64, |a, &c| a.max(c.abs()));
    let start = spread.max(target);
    let anneal = (((start / target).ln() / -ANNEAL_FACTOR.ln()).ceil() as usize).min(max_iters / 2);

    let mut f = vec![0.0; k];
    let mut g = vec![0.0; m];
    let mut best: Option<(f64, Vec<f64>, Vec<f64>, usize)> = None;
    let mut iterations = 0;

    for it in 1..=max_iters {
        iterations = it;
        let eps = if it < anneal {
            start * (target / start).powf(it as f64 / anneal as f64)
        } else {
            target
        };
        for i in 0..k {
            f[i] = -eps * log_sum_exp((0..m).map(|j| log_nu[j] + (g[j] - cost[(i, j)]) / eps));
        }
        for j in 0..m {
            g[j] = -eps * log_sum_exp((0..k).map(|i| log_mu[i] + (f[i] - cost[(i, j)]) / eps));
        }
        // columns are exact after the g-update; rows carry the residual
        let row_res = (0..k)
            .map(|i| {
                let mass: f64 = (0..m)
                    .map(|j| (log_mu[i] + log_nu[j] + (f[i] + g[j] - cost[(i, j)]) / eps).exp())
                    .sum();
                (mass - mu[i]).abs()
            })
            .fold(0.0, f64::max);
        if it < anneal {
            continue;
        }
        if best.as_ref().is_none_or(|b| row_res < b.0) {
            best = Some((row_res, f.clone(), g.clone(), it));
        }
        if row_res <= problem.tolerance {
            break;
        }
    }

    let (_, f, g, _) = best.expect("at least one iteration");
    let mut plan = Matrix::zeros(k, m);
    for i in 0..k {
        for j in 0..m {
            plan[(i, j)] = (log_mu[i] + log_nu[j] + (f[i] + g[j] - cost[(i, j)]) / target).exp();
        }
    }
    if !plan.is_finite() {
        return Err(Error::NonFinite("sinkhorn plan"));
    }
    let (row_residual, col_residual) = residuals(&plan, mu, nu);
    Ok(TransportPlan {
        converged: row_residual.max(col_residual) <= problem.tolerance,
        plan,
        row_residual,
        col_residual,
        iterations,
    })
}

fn residuals(plan: &Matrix, mu: &[f64], nu: &[f64]) -> (f64, f64) {
    let row = plan
        .row_sums()
        .iter()
        .zip(mu)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let col = plan
        .col_sums()
        .iter()
        .zip(nu)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (row, col)
}

/// Largest instance (`rows·cols`) the exact solver accepts.
pub const EXACT_LP_MAX_CELLS: usize = 16;

/// Exact unregularized transport by full vertex enumeration.
///
/// Each vertex of the transportation polytope is a basic feasible solution whose
/// support is a spanning tree of the bipartite row/column graph. Every
/// `(K+M−1)`-subset of cells is tested; acyclic subsets are solved by peeling
/// leaves, and the cheapest nonnegative solution wins.
pub fn solve_exact_lp(cost: &Matrix, row_marginal: &[f64], col_marginal: &[f64]) -> Result<TransportPlan> {
    cost.ensure_finite("transport cost")?;
    validate_marginals(cost, row_marginal, col_marginal)?;
    let (k, m) = cost.shape();
    if k * m > EXACT_LP_MAX_CELLS {
        return Err(Error::InvalidArgument(format!(
            "exact LP limited to {EXACT_LP_MAX_CELLS} cells, got {k}x{m}"
        )));
    }
    let cells: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let basis_size = k + m - 1;

    let mut best: Option<(f64, Vec<f64>, Vec<usize>)> = None;
    let mut combo: Vec<usize> = (0..basis_size).collect();
    loop {
        if let Some(values) = solve_tree(&combo, &cells, k, m, row_marginal, col_marginal) {
            let objective: f64 = combo
                .iter()
                .zip(&values)
                .map(|(&c, v)| cost[cells[c]] * v)
                .sum();
            if best.as_ref().is_none_or(|b| objective < b.0 - 1e-15) {
                best = Some((objective, values, combo.clone()));
            }
        }
        if !next_combination(&mut combo, cells.len()) {
            break;
        }
    }

    let (_, values, support) =
        best.ok_or_else(|| Error::Degenerate("transportation polytope has no vertex".into()))?;
    let mut plan = Matrix::zeros(k, m);
    for (&c, &v) in support.iter().zip(&values) {
        plan[cells[c]] = v.max(0.0);
    }
    let (row_residual, col_residual) = residuals(&plan, row_marginal, col_marginal);
    Ok(TransportPlan {
        plan,
        row_residual,
        col_residual,
        iterations: 0,
        converged: true,
    })
}

fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let r = combo.len();
    let mut i = r;
    while i > 0 {
        i -= 1;
        if combo[i] < n - r + i {
            combo[i] += 1;
            for j in i + 1..r {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Solves for the flows on a candidate basis. Returns `None` if the cells
/// contain a cycle or the unique solution is infeasible.
fn solve_tree(
    combo: &[usize],
    cells: &[(usize, usize)],
    k: usize,
    m: usize,
    mu: &[f64],
    nu: &[f64],
) -> Option<Vec<f64>> {
    // nodes 0..k are rows, k..k+m are columns
    let mut parent: Vec<usize> = (0..k + m).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &c in combo {
        let (i, j) = cells[c];
        let (a, b) = (find(&mut parent, i), find(&mut parent, k + j));
        if a == b {
            return None;
        }
        parent[a] = b;
    }

    let mut remaining: Vec<f64> = mu.iter().chain(nu).copied().collect();
    let mut degree = vec![0usize; k + m];
    for &c in combo {
        let (i, j) = cells[c];
        degree[i] += 1;
        degree[k + j] += 1;
    }
    let mut values = vec![0.0; combo.len()];
    let mut active = vec![true; combo.len()];
    for _ in 0..combo.len() {
        let leaf = (0..k + m).find(|&n| degree[n] == 1)?;
        let e = (0..combo.len()).find(|&e| {
            let (i, j) = cells[combo[e]];
            active[e] && (i == leaf || k + j == leaf)
        })?;
        let (i, j) = cells[combo[e]];
        let other = if i == leaf { k + j } else { i };
        let flow = remaining[leaf];
        if flow < -1e-12 {
            return None;
        }
        values[e] = flow;
        remaining[leaf] = 0.0;
        remaining[other] -= flow;
        degree[leaf] -= 1;
        degree[other] -= 1;
        active[e] = false;
    }
    values.iter().all(|&v| v >= -1e-12).then_some(values)
}

/// Row index holding the largest entry of column `j`. Ties go to the lowest index.
pub fn plan_column_argmax(plan: &TransportPlan, j: usize) -> Result<usize> {
    let (_, m) = plan.plan.shape();
    if j >= m {
        return Err(Error::InvalidArgument(format!(
            "column {j} out of range for plan with {m} columns"
        )));
    }
    let column = plan.plan.column(j);
    if column.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate(format!("plan column {j} carries no mass")));
    }
    Ok(linalg::argmax(&column))
}

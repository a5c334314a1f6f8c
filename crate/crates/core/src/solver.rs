//! Levenberg-Marquardt driver shared by window relocalization and the pose graph.
//!
//! Problems expose a Gauss-Newton linearization `(H, g)` of the cost
//! `F(x) = sum_k rho(|r_k(x)|^2)`, with `H = sum rho' J^T J` and `g = sum rho' J^T r`.
//! Steps solve `(H + lambda I) delta = -g`. The damping is isotropic so that the
//! iterates are equivariant under rotations of the parameter blocks.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};

/// Huber loss on a squared norm `s`: returns `(rho(s), rho'(s))`.
pub fn huber(s: f64, delta: f64) -> (f64, f64) {
    let d2 = delta * delta;
    if s <= d2 {
        (s, 1.0)
    } else {
        let r = s.sqrt();
        (2.0 * delta * r - d2, delta / r)
    }
}

/// Symmetric sparse matrix, lower triangle stored by `(row, col)` with `row >= col`.
#[derive(Clone, Debug, Default)]
pub struct SparseSymmetric {
    n: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl SparseSymmetric {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Adds `v` at `(i, j)` (and implicitly `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let key = if i >= j { (i, j) } else { (j, i) };
        *self.entries.entry(key).or_insert(0.0) += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let key = if i >= j { (i, j) } else { (j, i) };
        self.entries.get(&key).copied().unwrap_or(0.0)
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for (&(i, j), &v) in &self.entries {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (&(i, j), &v) in &self.entries {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m
    }

    /// Reverse Cuthill-McKee ordering of the sparsity graph. `perm[k]` is the
    /// original index placed at position `k`.
    fn rcm_ordering(&self) -> Vec<usize> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in self.entries.keys() {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        let degree: Vec<usize> = adj.iter().map(|a| a.len()).collect();
        let mut visited = vec![false; self.n];
        let mut order = Vec::with_capacity(self.n);
        let mut by_degree: Vec<usize> = (0..self.n).collect();
        by_degree.sort_by_key(|&i| (degree[i], i));
        for &start in &by_degree {
            if visited[start] {
                continue;
            }
            visited[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                order.push(v);
                let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
                next.sort_by_key(|&u| (degree[u], u));
                for u in next {
                    visited[u] = true;
                    queue.push_back(u);
                }
            }
        }
        order.reverse();
        order
    }

    /// Solves `(self + shift I) x = b` by envelope Cholesky under RCM ordering.
    /// Returns `None` if the shifted matrix is not numerically positive definite.
    pub fn solve_shifted(&self, b: &DVector<f64>, shift: f64) -> Option<DVector<f64>> {
        let n = self.n;
        if n == 0 {
            return Some(DVector::zeros(0));
        }
        let perm = self.rcm_ordering();
        let mut pos = vec![0usize; n];
        for (k, &orig) in perm.iter().enumerate() {
            pos[orig] = k;
        }
        // Envelope start of each permuted row.
        let mut first: Vec<usize> = (0..n).collect();
        for &(i, j) in self.entries.keys() {
            let (pi, pj) = (pos[i], pos[j]);
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            if c < first[r] {
                first[r] = c;
            }
        }
        let mut offset = vec![0usize; n + 1];
        for r in 0..n {
            offset[r + 1] = offset[r] + (r - first[r] + 1);
        }
        let mut l = vec![0.0; offset[n]];
        for (&(i, j), &v) in &self.entries {
            let (pi, pj) = (pos[i], pos[j]);
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            l[offset[r] + c - first[r]] += v;
        }
        for r in 0..n {
            l[offset[r] + r - first[r]] += shift;
        }
        let idx = |r: usize, c: usize, first: &[usize]| offset[r] + c - first[r];
        for r in 0..n {
            for c in first[r]..=r {
                let k0 = first[r].max(first[c]);
                let mut sum = l[idx(r, c, &first)];
                for k in k0..c {
                    sum -= l[idx(r, k, &first)] * l[idx(c, k, &first)];
                }
                if c == r {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return None;
                    }
                    l[idx(r, r, &first)] = sum.sqrt();
                } else {
                    l[idx(r, c, &first)] = sum / l[idx(c, c, &first)];
                }
            }
        }
        // Forward substitution L y = P b.
        let mut y: Vec<f64> = perm.iter().map(|&orig| b[orig]).collect();
        for r in 0..n {
            let mut sum = y[r];
            for c in first[r]..r {
                sum -= l[idx(r, c, &first)] * y[c];
            }
            y[r] = sum / l[idx(r, r, &first)];
        }
        // Back substitution L^T z = y, column-oriented over the row envelope.
        for r in (0..n).rev() {
            y[r] /= l[idx(r, r, &first)];
            let yr = y[r];
            for c in first[r]..r {
                y[c] -= l[idx(r, c, &first)] * yr;
            }
        }
        let mut x = DVector::zeros(n);
        for (k, &orig) in perm.iter().enumerate() {
            x[orig] = y[k];
        }
        Some(x)
    }
}

/// Gauss-Newton normal matrix, dense or sparse.
#[derive(Clone, Debug)]
pub enum NormalMatrix {
    Dense(DMatrix<f64>),
    Sparse(SparseSymmetric),
}

impl NormalMatrix {
    fn dim(&self) -> usize {
        match self {
            NormalMatrix::Dense(m) => m.nrows(),
            NormalMatrix::Sparse(s) => s.dim(),
        }
    }

    fn trace(&self) -> f64 {
        match self {
            NormalMatrix::Dense(m) => m.trace(),
            NormalMatrix::Sparse(s) => s.trace(),
        }
    }

    fn quad(&self, x: &DVector<f64>) -> f64 {
        match self {
            NormalMatrix::Dense(m) => x.dot(&(m * x)),
            NormalMatrix::Sparse(s) => x.dot(&s.mul_vec(x)),
        }
    }

    fn solve_shifted(&self, b: &DVector<f64>, shift: f64) -> Option<DVector<f64>> {
        match self {
            NormalMatrix::Dense(m) => {
                let mut a = m.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += shift;
                }
                a.cholesky().map(|c| c.solve(b))
            }
            NormalMatrix::Sparse(s) => s.solve_shifted(b, shift),
        }
    }
}

pub struct Linearization {
    pub cost: f64,
    pub hessian: NormalMatrix,
    pub gradient: DVector<f64>,
}

/// A robust nonlinear least-squares problem over a manifold state.
pub trait LeastSquares {
    type State: Clone;

    fn cost(&self, state: &Self::State) -> f64;
    fn linearize(&self, state: &Self::State) -> Linearization;
    /// Applies a tangent-space increment.
    fn retract(&self, state: &Self::State, delta: &DVector<f64>) -> Self::State;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmSettings {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub rel_cost_tol: f64,
    /// Stop when the infinity norm of the gradient drops below this.
    pub grad_tol: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            rel_cost_tol: 1e-8,
            grad_tol: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    ZeroCost,
    Gradient,
    RelativeDecrease,
    MaxIterations,
    DampingOverflow,
}

#[derive(Clone, Debug)]
pub struct LmReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl LmReport {
    pub fn converged(&self) -> bool {
        self.termination != Termination::MaxIterations && self.termination != Termination::DampingOverflow
    }
}

pub fn levenberg_marquardt<P: LeastSquares>(
    problem: &P,
    initial: P::State,
    settings: &LmSettings,
) -> (P::State, LmReport) {
    let mut state = initial;
    let mut lin = problem.linearize(&state);
    let initial_cost = lin.cost;
    let mut cost = lin.cost;
    let n = lin.hessian.dim();
    let mut lambda = if n > 0 {
        let t = lin.hessian.trace() / n as f64;
        1e-4 * if t > 0.0 { t } else { 1.0 }
    } else {
        0.0
    };
    let mut nu = 2.0;
    let mut report = LmReport {
        iterations: 0,
        accepted_steps: 0,
        initial_cost,
        final_cost: cost,
        termination: Termination::MaxIterations,
        cost_history: vec![cost],
    };
    if n == 0 {
        report.termination = Termination::Gradient;
        return (state, report);
    }
    loop {
        if cost == 0.0 {
            report.termination = Termination::ZeroCost;
            break;
        }
        if lin.gradient.amax() < settings.grad_tol {
            report.termination = Termination::Gradient;
            break;
        }
        if report.iterations >= settings.max_iterations {
            report.termination = Termination::MaxIterations;
            break;
        }
        if lambda > 1e32 {
            report.termination = Termination::DampingOverflow;
            break;
        }
        report.iterations += 1;
        let neg_g = -&lin.gradient;
        let Some(delta) = lin.hessian.solve_shifted(&neg_g, lambda) else {
            lambda *= nu;
            nu *= 2.0;
            continue;
        };
        let candidate = problem.retract(&state, &delta);
        let new_cost = problem.cost(&candidate);
        let predicted = -(2.0 * lin.gradient.dot(&delta) + lin.hessian.quad(&delta));
        if new_cost.is_finite() && new_cost < cost {
            let rel = (cost - new_cost) / cost;
            let rho = if predicted > 0.0 {
                (cost - new_cost) / predicted
            } else {
                1.0
            };
            lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
            state = candidate;
            lin = problem.linearize(&state);
            cost = lin.cost;
            report.accepted_steps += 1;
            report.cost_history.push(cost);
            if rel < settings.rel_cost_tol {
                report.termination = Termination::RelativeDecrease;
                break;
            }
        } else {
            lambda *= nu;
            nu *= 2.0;
        }
    }
    report.final_cost = cost;
    (state, report)
}

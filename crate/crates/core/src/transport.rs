//! Optimal transport between sentence distributions: squared-Euclidean cost
//! matrices, the inexact proximal point (IPOT) solver, and two exact oracles
//! used to check it (1-D quantile coupling and brute-force assignment).

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::diffcore::RealArray;
use crate::error::{invalid, Error, Result};

const WEIGHT_SLACK: f64 = 1e-6;
const KERNEL_FLOOR: f64 = 1e-300;
const INNER_STOP: f64 = 1e-14;

/// Support points (rows of an `N x d` array) with probability weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceDistribution {
    support: RealArray,
    weights: Vec<f64>,
}

impl SentenceDistribution {
    /// Weights summing to within `1e-6` of one are renormalized; anything
    /// further off is rejected as a caller bug.
    pub fn new(support: RealArray, weights: Vec<f64>) -> Result<Self> {
        if support.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "support must be N x d, got {:?}",
                support.shape()
            )));
        }
        if weights.len() != support.rows() {
            return Err(Error::Shape(format!(
                "{} weights for {} support points",
                weights.len(),
                support.rows()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SLACK {
            return Err(invalid(format!("weights sum to {total}, expected 1")));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { support, weights })
    }

    pub fn uniform(support: RealArray) -> Result<Self> {
        let n = support.rows();
        Self::new(support, vec![1.0 / n as f64; n])
    }

    /// Builds from a list of points of equal dimension.
    pub fn from_points(points: &[Vec<f64>], weights: Vec<f64>) -> Result<Self> {
        let d = points.first().map(Vec::len).ok_or_else(|| invalid("no support points"))?;
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::Shape("support points differ in dimension".into()));
        }
        let flat = points.iter().flatten().copied().collect();
        Self::new(RealArray::matrix(points.len(), d, flat)?, weights)
    }

    pub fn uniform_points(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len().max(1);
        Self::from_points(points, vec![1.0 / n as f64; points.len()])
    }

    pub fn support(&self) -> &RealArray {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support.cols()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.support.row_slice(i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    entries: RealArray,
    dim: usize,
}

impl CostMatrix {
    pub fn entries(&self) -> &RealArray {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries.get(i, j)
    }

    pub fn rows(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Coupling between source rows and target columns.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    coupling: RealArray,
    residual: f64,
}

impl TransportPlan {
    pub fn coupling(&self) -> &RealArray {
        &self.coupling
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.coupling.get(i, j)
    }

    /// `sum_i |row_i - p_i| + sum_j |col_j - q_j|`.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.coupling.rows())
            .map(|i| self.coupling.row_slice(i).iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let (n, m) = (self.coupling.rows(), self.coupling.cols());
        (0..m)
            .map(|j| (0..n).map(|i| self.coupling.get(i, j)).sum())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpotConfig {
    /// Proximal step; the Gibbs kernel is `exp(-d / beta)`.
    pub beta: f64,
    pub outer_iters: usize,
    /// Upper bound on scaling sweeps per outer step; a sweep sequence stops
    /// early once the row marginals match.
    pub inner_iters: usize,
    pub marginal_tol: f64,
}

impl Default for IpotConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            outer_iters: 500,
            inner_iters: 10_000,
            marginal_tol: 1e-6,
        }
    }
}

impl IpotConfig {
    /// Setting used inside the transport loss. A larger proximal step keeps
    /// the value smooth in the support points, which the frozen-plan
    /// gradient relies on; the default is tuned for accuracy instead.
    pub fn for_loss() -> Self {
        Self {
            beta: 1.0,
            inner_iters: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid("ipot beta must be positive"));
        }
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(invalid("ipot iteration counts must be positive"));
        }
        if !(self.marginal_tol > 0.0) {
            return Err(invalid("ipot marginal_tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IpotSolution {
    /// `sum_ij T_ij d_ij` for the returned plan.
    pub value: f64,
    pub plan: TransportPlan,
    /// Whether the final marginal residual is within `marginal_tol`.
    pub converged: bool,
    /// Transport cost after each outer iteration.
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `d_ij = |u_i - v_j|^2`.
pub fn cost_matrix(u: &SentenceDistribution, v: &SentenceDistribution) -> Result<CostMatrix> {
    if u.dim() != v.dim() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            u.dim(),
            v.dim()
        )));
    }
    let (n, m) = (u.len(), v.len());
    let mut entries = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            entries.push(sq_dist(u.point(i), v.point(j)));
        }
    }
    Ok(CostMatrix {
        entries: RealArray::matrix(n, m, entries)?,
        dim: u.dim(),
    })
}

/// Inexact proximal point iteration for the transport LP.
///
/// Each outer step multiplies the current plan by the Gibbs kernel and
/// rescales it toward the marginals with up to `inner_iters` alternating
/// row/column updates. The full outer budget is always spent; the final
/// marginal residual decides `converged`.
pub fn ipot_solve(
    u: &SentenceDistribution,
    v: &SentenceDistribution,
    cost: &CostMatrix,
    cfg: &IpotConfig,
) -> Result<IpotSolution> {
    cfg.validate()?;
    let (n, m) = (u.len(), v.len());
    if cost.rows() != n || cost.cols() != m {
        return Err(Error::Shape(format!(
            "cost is {}x{}, distributions are {n} and {m}",
            cost.rows(),
            cost.cols()
        )));
    }
    let c = cost.entries().values();
    let kernel: Vec<f64> = c.iter().map(|d| (-d / cfg.beta).exp().max(KERNEL_FLOOR)).collect();
    for i in 0..n {
        if kernel[i * m..(i + 1) * m].iter().all(|&k| k <= KERNEL_FLOOR) {
            return Err(Error::Numeric(format!("kernel row {i} underflows entirely")));
        }
    }
    for j in 0..m {
        if (0..n).all(|i| kernel[i * m + j] <= KERNEL_FLOOR) {
            return Err(Error::Numeric(format!("kernel column {j} underflows entirely")));
        }
    }

    let (p, q) = (u.weights(), v.weights());
    let mut plan = vec![1.0; n * m];
    let mut a = vec![1.0; n];
    let mut b = vec![1.0 / m as f64; m];
    let mut gibbs = vec![0.0; n * m];
    let mut trace = Vec::with_capacity(cfg.outer_iters);

    for _ in 0..cfg.outer_iters {
        for (g, (k, t)) in gibbs.iter_mut().zip(kernel.iter().zip(&plan)) {
            *g = k * t;
        }
        for _ in 0..cfg.inner_iters {
            for i in 0..n {
                let s: f64 = gibbs[i * m..(i + 1) * m].iter().zip(&b).map(|(g, bj)| g * bj).sum();
                a[i] = p[i] / s;
            }
            for j in 0..m {
                let s: f64 = (0..n).map(|i| gibbs[i * m + j] * a[i]).sum();
                b[j] = q[j] / s;
            }
            // Columns are exact after the b update; stop once rows are too.
            let row_gap: f64 = (0..n)
                .map(|i| {
                    let s: f64 = gibbs[i * m..(i + 1) * m].iter().zip(&b).map(|(g, bj)| g * bj).sum();
                    (a[i] * s - p[i]).abs()
                })
                .sum();
            if row_gap <= INNER_STOP {
                break;
            }
        }
        for i in 0..n {
            for j in 0..m {
                plan[i * m + j] = a[i] * gibbs[i * m + j] * b[j];
            }
        }
        if let Some(bad) = plan.iter().position(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!(
                "ipot plan entry {bad} became non-finite"
            )));
        }
        trace.push(plan.iter().zip(c).map(|(t, d)| t * d).sum());
    }

    let coupling = RealArray::matrix(n, m, plan)?;
    let mut plan = TransportPlan { coupling, residual: 0.0 };
    let residual: f64 = plan
        .row_sums()
        .iter()
        .zip(p)
        .chain(plan.col_sums().iter().zip(q))
        .map(|(s, w)| (s - w).abs())
        .sum();
    plan.residual = residual;
    Ok(IpotSolution {
        value: *trace.last().expect("outer_iters >= 1"),
        converged: residual <= cfg.marginal_tol,
        plan,
        trace,
    })
}

/// Convenience: cost matrix plus IPOT.
pub fn ipot_distance(
    u: &SentenceDistribution,
    v: &SentenceDistribution,
    cfg: &IpotConfig,
) -> Result<IpotSolution> {
    let cost = cost_matrix(u, v)?;
    ipot_solve(u, v, &cost, cfg)
}

/// Exact squared-cost transport value for scalar supports via the monotone
/// (quantile) coupling.
pub fn exact_1d_oracle(u: &SentenceDistribution, v: &SentenceDistribution) -> Result<f64> {
    if u.dim() != 1 || v.dim() != 1 {
        return Err(invalid("1-D oracle needs scalar support points"));
    }
    let sorted = |d: &SentenceDistribution| -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = (0..d.len()).map(|i| (d.point(i)[0], d.weights()[i])).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts
    };
    let (xs, ys) = (sorted(u), sorted(v));
    let (mut i, mut j) = (0, 0);
    let (mut left_x, mut left_y) = (xs[0].1, ys[0].1);
    let mut total = 0.0;
    while i < xs.len() && j < ys.len() {
        let mass = left_x.min(left_y);
        total += mass * (xs[i].0 - ys[j].0).powi(2);
        left_x -= mass;
        left_y -= mass;
        // Whichever side is exhausted advances; ties advance both.
        if left_x <= 1e-15 {
            i += 1;
            if i < xs.len() {
                left_x = xs[i].1;
            }
        }
        if left_y <= 1e-15 {
            j += 1;
            if j < ys.len() {
                left_y = ys[j].1;
            }
        }
    }
    Ok(total)
}

pub const MAX_ASSIGNMENT_SIZE: usize = 6;

/// Exact transport value for `n = m <= 6` uniform distributions, by
/// enumerating all `n!` permutations.
pub fn exact_assignment_oracle(u: &SentenceDistribution, v: &SentenceDistribution) -> Result<f64> {
    let n = u.len();
    if n != v.len() || n > MAX_ASSIGNMENT_SIZE {
        return Err(invalid(format!(
            "assignment oracle needs equal sizes <= {MAX_ASSIGNMENT_SIZE}, got {n} and {}",
            v.len()
        )));
    }
    let uniform = 1.0 / n as f64;
    let is_uniform = |d: &SentenceDistribution| d.weights().iter().all(|w| (w - uniform).abs() <= 1e-12);
    if !is_uniform(u) || !is_uniform(v) {
        return Err(invalid("assignment oracle needs uniform weights"));
    }
    let cost = cost_matrix(u, v)?;
    let best = (0..n)
        .permutations(n)
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    Ok(best / n as f64)
}

/// `W_2 = sqrt(OT value)` from whichever exact oracle applies.
pub fn exact_w2(u: &SentenceDistribution, v: &SentenceDistribution) -> Result<f64> {
    let value = if u.dim() == 1 && v.dim() == 1 {
        exact_1d_oracle(u, v)?
    } else {
        exact_assignment_oracle(u, v)?
    };
    Ok(value.max(0.0).sqrt())
}

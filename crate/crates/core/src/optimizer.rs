//! Weighted SGD, learning-rate schedules and the convergence-rate harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::ParamSet;
use crate::error::{invalid, Error, Result};
use crate::objective::{grad_weight, GradientWeightRule};

/// Loss value above which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `c / sqrt(T)` at every step.
    ConstantOverSqrtT { c: f64 },
    /// `lr0` up to and including `halve_after_epoch`, then halved each epoch.
    StartThenHalve { lr0: f64, halve_after_epoch: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::StartThenHalve {
                lr0: 1.0,
                halve_after_epoch: 8,
            },
            epochs: 10,
            batch_size: 1,
            seed: 1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = match self.schedule {
            Schedule::ConstantOverSqrtT { c } => c,
            Schedule::StartThenHalve { lr0, .. } => lr0,
        };
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(invalid(format!("learning-rate constant must be positive, got {rate}")));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be >= 1"));
        }
        Ok(())
    }
}

/// Step size at iteration `t` (0-based) of a run with `total_t` steps.
///
/// Epochs are 1-based; a run of `total_t` steps is split evenly over
/// `cfg.epochs`.
pub fn lr_at(t: usize, total_t: usize, cfg: &SgdConfig) -> f64 {
    match cfg.schedule {
        Schedule::ConstantOverSqrtT { c } => c / (total_t.max(1) as f64).sqrt(),
        Schedule::StartThenHalve { .. } => {
            let per_epoch = (total_t / cfg.epochs.max(1)).max(1);
            lr_for_epoch(t / per_epoch + 1, total_t, cfg)
        }
    }
}

/// Step size used throughout 1-based `epoch`.
pub fn lr_for_epoch(epoch: usize, total_t: usize, cfg: &SgdConfig) -> f64 {
    match cfg.schedule {
        Schedule::ConstantOverSqrtT { c } => c / (total_t.max(1) as f64).sqrt(),
        Schedule::StartThenHalve {
            lr0,
            halve_after_epoch,
        } => {
            if epoch <= halve_after_epoch {
                lr0
            } else {
                lr0 / 2f64.powi((epoch - halve_after_epoch) as i32)
            }
        }
    }
}

/// `params - lr * weight * grads`, as a new snapshot.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64, weight: f64) -> Result<ParamSet> {
    if !(lr > 0.0) {
        return Err(invalid(format!("learning rate must be positive, got {lr}")));
    }
    if !weight.is_finite() {
        return Err(invalid(format!("weight must be finite, got {weight}")));
    }
    if !params.same_layout(grads) {
        return Err(Error::Shape("gradient layout does not match parameters".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name.to_string()));
    }
    let mut next = params.clone();
    next.add_scaled(grads, -lr * weight)?;
    Ok(next)
}

/// Average of `weight_i * grad_i`, reduced in the given order.
pub fn weighted_average(per_sample: &[(ParamSet, f64)]) -> Result<ParamSet> {
    let first = per_sample
        .first()
        .ok_or_else(|| invalid("cannot average an empty batch"))?;
    let mut acc = first.0.zeros_like();
    let scale = 1.0 / per_sample.len() as f64;
    for (g, w) in per_sample {
        acc.add_scaled(g, w * scale)?;
    }
    Ok(acc)
}

/// A smooth objective `(1/n) sum_i l_i(theta)` over flat parameters.
pub trait FiniteSumProblem {
    fn n(&self) -> usize;
    fn dim(&self) -> usize;
    fn initial_point(&self) -> Vec<f64>;
    /// Writes the gradient of term `i` into `grad` and returns its value.
    fn term(&self, i: usize, theta: &[f64], grad: &mut [f64]) -> f64;
}

/// `l_i(theta) = log(1 + |theta - a_i|^2)`, with anchors drawn from a seeded
/// Gaussian. Each term is smooth, bounded-gradient and nonconvex.
#[derive(Clone, Debug)]
pub struct LogQuadraticSum {
    anchors: Vec<Vec<f64>>,
    start: Vec<f64>,
}

impl LogQuadraticSum {
    pub fn new(n: usize, dim: usize, spread: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |s: f64| -> Vec<f64> {
            (0..dim)
                .map(|_| s * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        };
        let anchors = (0..n).map(|_| draw(spread)).collect();
        let start = draw(spread);
        Self { anchors, start }
    }
}

impl FiniteSumProblem for LogQuadraticSum {
    fn n(&self) -> usize {
        self.anchors.len()
    }

    fn dim(&self) -> usize {
        self.start.len()
    }

    fn initial_point(&self) -> Vec<f64> {
        self.start.clone()
    }

    fn term(&self, i: usize, theta: &[f64], grad: &mut [f64]) -> f64 {
        let a = &self.anchors[i];
        let d2: f64 = theta.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum();
        let k = 2.0 / (1.0 + d2);
        for ((g, x), y) in grad.iter_mut().zip(theta).zip(a) {
            *g = k * (x - y);
        }
        d2.ln_1p()
    }
}

/// `l_i(theta) = 0.5 |theta - a_i|^2` with fixed anchors.
#[derive(Clone, Debug)]
pub struct QuadraticSum {
    pub anchors: Vec<Vec<f64>>,
    pub start: Vec<f64>,
}

impl FiniteSumProblem for QuadraticSum {
    fn n(&self) -> usize {
        self.anchors.len()
    }

    fn dim(&self) -> usize {
        self.start.len()
    }

    fn initial_point(&self) -> Vec<f64> {
        self.start.clone()
    }

    fn term(&self, i: usize, theta: &[f64], grad: &mut [f64]) -> f64 {
        let mut v = 0.0;
        for ((g, x), y) in grad.iter_mut().zip(theta).zip(&self.anchors[i]) {
            *g = x - y;
            v += 0.5 * (x - y) * (x - y);
        }
        v
    }
}

/// Full weighted gradient `(1/n) sum_i w_i grad l_i` and the mean loss.
pub fn weighted_full_gradient<P: FiniteSumProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    rule: &GradientWeightRule,
) -> (Vec<f64>, f64) {
    let d = problem.dim();
    let mut total = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut loss = 0.0;
    for i in 0..problem.n() {
        let v = problem.term(i, theta, &mut g);
        let w = grad_weight(v, rule);
        for (t, gi) in total.iter_mut().zip(&g) {
            *t += w * gi;
        }
        loss += v;
    }
    let n = problem.n() as f64;
    total.iter_mut().for_each(|t| *t /= n);
    (total, loss / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub final_theta: Vec<f64>,
    /// `|weighted full gradient|^2` at each iterate `t = 0..T-1`.
    pub grad_norm_sq: Vec<f64>,
    pub final_grad_norm: f64,
    /// Every per-sample weight applied, for bound auditing.
    pub weight_range: (f64, f64),
}

/// Single-sample weighted SGD for `total_t` steps at constant step `lr`.
pub fn run_weighted_sgd<P: FiniteSumProblem + ?Sized>(
    problem: &P,
    total_t: usize,
    lr: f64,
    rule: &GradientWeightRule,
    seed: u64,
) -> Result<RunTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = problem.initial_point();
    let mut g = vec![0.0; problem.dim()];
    let mut norms = Vec::with_capacity(total_t);
    let mut weight_range = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..total_t {
        let (full, loss) = weighted_full_gradient(problem, &theta, rule);
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { t: total_t, seed, loss });
        }
        norms.push(full.iter().map(|x| x * x).sum());
        let i = rng.random_range(0..problem.n());
        let v = problem.term(i, &theta, &mut g);
        let w = grad_weight(v, rule);
        weight_range = (weight_range.0.min(w), weight_range.1.max(w));
        for (x, gi) in theta.iter_mut().zip(&g) {
            *x -= lr * w * gi;
        }
    }
    let (full, loss) = weighted_full_gradient(problem, &theta, rule);
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { t: total_t, seed, loss });
    }
    Ok(RunTrace {
        final_theta: theta,
        grad_norm_sq: norms,
        final_grad_norm: full.iter().map(|x| x * x).sum::<f64>().sqrt(),
        weight_range,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRecord {
    pub total_t: usize,
    pub lr: f64,
    /// `min_t` of the seed-averaged `|grad(theta_t)|^2`.
    pub min_grad_norm_sq: f64,
    /// Per-seed `min_t |grad(theta_t)|^2`, for diagnostics.
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub records: Vec<ConvergenceRecord>,
    pub slope: f64,
    pub intercept: f64,
    pub seeds: Vec<u64>,
}

/// Least-squares fit of `y = slope * x + intercept`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Runs weighted SGD with step `c / sqrt(T)` for each `T` and fits the slope
/// of `log(min_t E|grad(theta_t)|^2)` against `log T`, the expectation being
/// the average over seeds.
pub fn convergence_harness<P: FiniteSumProblem + ?Sized>(
    problem: &P,
    t_list: &[usize],
    seeds: &[u64],
    c: f64,
    rule: &GradientWeightRule,
) -> Result<ConvergenceReport> {
    if t_list.len() < 4 {
        return Err(invalid("need at least 4 horizons"));
    }
    if t_list.windows(2).any(|w| w[0] >= w[1]) || t_list[0] == 0 {
        return Err(invalid("horizons must be positive and strictly increasing"));
    }
    if (t_list[t_list.len() - 1] as f64 / t_list[0] as f64).log10() < 1.5 {
        return Err(invalid("horizons must span at least 1.5 orders of magnitude"));
    }
    if seeds.len() < 3 {
        return Err(invalid("need at least 3 seeds"));
    }
    rule.validate()?;
    let mut records = Vec::with_capacity(t_list.len());
    for &total_t in t_list {
        let lr = c / (total_t as f64).sqrt();
        let traces = seeds
            .iter()
            .map(|&s| run_weighted_sgd(problem, total_t, lr, rule, s))
            .collect::<Result<Vec<_>>>()?;
        let k = traces.len() as f64;
        let mean = (0..total_t)
            .map(|t| traces.iter().map(|r| r.grad_norm_sq[t]).sum::<f64>() / k)
            .fold(f64::INFINITY, f64::min);
        let per_seed = traces
            .iter()
            .map(|r| r.grad_norm_sq.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        if !(mean > 0.0) {
            return Err(Error::Numeric(format!("min gradient norm is {mean} at T={total_t}")));
        }
        records.push(ConvergenceRecord {
            total_t,
            lr,
            min_grad_norm_sq: mean,
            per_seed,
        });
    }
    let xs: Vec<f64> = records.iter().map(|r| (r.total_t as f64).ln()).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.min_grad_norm_sq.ln()).collect();
    let (slope, intercept) = fit_line(&xs, &ys);
    Ok(ConvergenceReport {
        records,
        slope,
        intercept,
        seeds: seeds.to_vec(),
    })
}

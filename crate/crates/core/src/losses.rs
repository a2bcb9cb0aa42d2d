//! Euclidean sentence distance, cross-entropy, and the square-root word
//! mover's distance, each recorded on a [`Tape`] so the gradient flows back
//! to whatever produced the prediction.

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, RealArray, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::transport::{cost_matrix, ipot_solve, IpotConfig, IpotSolution, SentenceDistribution};

pub const DEFAULT_SQRT_GUARD: f64 = 1e-12;
pub const LOG_FLOOR: f64 = 1e-12;

fn default_loss_ipot() -> IpotConfig {
    IpotConfig::for_loss()
}

fn default_sqrt_guard() -> f64 {
    DEFAULT_SQRT_GUARD
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    Euclidean,
    CrossEntropy,
    Wd {
        #[serde(default = "default_loss_ipot")]
        ipot: IpotConfig,
        #[serde(default = "default_sqrt_guard")]
        sqrt_guard: f64,
    },
}

impl LossKind {
    pub fn wd() -> Self {
        LossKind::Wd {
            ipot: IpotConfig::for_loss(),
            sqrt_guard: DEFAULT_SQRT_GUARD,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Euclidean => "euclidean",
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Wd { .. } => "wd",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossKind::Wd { ipot, sqrt_guard } = self {
            ipot.validate()?;
            if !(*sqrt_guard > 0.0) {
                return Err(invalid("sqrt_guard must be positive"));
            }
        }
        Ok(())
    }
}

/// Conditions worth surfacing without failing the evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossDiagnostics {
    /// Target positions whose predicted probability fell below the log floor.
    pub log_floor_hits: usize,
    /// Final marginal residual of the transport plan (wd only).
    pub ipot_residual: Option<f64>,
    /// `false` when IPOT ended above its marginal tolerance.
    pub ipot_converged: Option<bool>,
}

impl LossDiagnostics {
    pub fn has_warning(&self) -> bool {
        self.log_floor_hits > 0 || self.ipot_converged == Some(false)
    }
}

#[derive(Clone, Debug)]
pub struct LossValue {
    pub var: Var,
    pub value: f64,
    pub diagnostics: LossDiagnostics,
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item().expect("loss nodes are scalar")
}

/// `|u - v|_2`.
pub fn euclidean_loss(tape: &mut Tape, u: Var, v: Var) -> Result<LossValue> {
    let diff = tape.sub(u, v)?;
    let var = tape.l2_norm(diff)?;
    Ok(LossValue {
        var,
        value: scalar(tape, var),
        diagnostics: LossDiagnostics::default(),
    })
}

pub fn euclidean_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("dimensions differ: {} vs {}", u.len(), v.len())));
    }
    Ok(u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Negative log-likelihood `sum_i -log p_i[y_i]` of the target ids under the
/// probability rows `probs` (`len x vocab`).
pub fn cross_entropy(tape: &mut Tape, probs: Var, targets: &[usize]) -> Result<LossValue> {
    let p = tape.value(probs);
    if p.shape().len() != 2 || p.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} targets for probability rows of shape {:?}",
            targets.len(),
            p.shape()
        )));
    }
    let vocab = p.cols();
    let mut mask = vec![0.0; p.len()];
    let mut floor_hits = 0;
    for (row, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(invalid(format!("target id {t} outside vocabulary {vocab}")));
        }
        if p.get(row, t) < LOG_FLOOR {
            floor_hits += 1;
        }
        mask[row * vocab + t] = 1.0;
    }
    let mask = tape.constant(RealArray::matrix(targets.len(), vocab, mask)?)?;
    let logp = tape.log_floored(probs, LOG_FLOOR)?;
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked)?;
    let var = tape.scale(total, -1.0)?;
    Ok(LossValue {
        var,
        value: scalar(tape, var),
        diagnostics: LossDiagnostics {
            log_floor_hits: floor_hits,
            ..LossDiagnostics::default()
        },
    })
}

/// Square-root transport distance between the rows of `support` (uniform
/// weights) and `target`.
///
/// The transport plan is solved once and then held fixed, so the recorded
/// expression is `sqrt(sum_ij T_ij |u_i - v_j|^2)` and its gradient with
/// respect to `u_i` is `sum_j T_ij 2 (u_i - v_j) / (2 sqrt(.))`.
pub fn wd_loss(
    tape: &mut Tape,
    support: Var,
    target: &SentenceDistribution,
    ipot: &IpotConfig,
    sqrt_guard: f64,
) -> Result<LossValue> {
    let u = SentenceDistribution::uniform(tape.value(support).clone())?;
    let cost = cost_matrix(&u, target)?;
    let sol = ipot_solve(&u, target, &cost, ipot)?;
    let (n, d) = (u.len(), u.dim());
    let m = target.len();

    let mut row_mass = Vec::with_capacity(n * d);
    let mut pulled = vec![0.0; n * d];
    let mut target_term = 0.0;
    for i in 0..n {
        let mut mass = 0.0;
        for j in 0..m {
            let t = sol.plan.get(i, j);
            mass += t;
            let vj = target.point(j);
            for (k, vk) in vj.iter().enumerate() {
                pulled[i * d + k] += t * vk;
            }
            target_term += t * vj.iter().map(|x| x * x).sum::<f64>();
        }
        row_mass.extend(std::iter::repeat_n(mass, d));
    }
    let row_mass = tape.constant(RealArray::matrix(n, d, row_mass)?)?;
    let pulled = tape.constant(RealArray::matrix(n, d, pulled)?)?;
    let target_term = tape.constant(RealArray::scalar(target_term)?)?;

    let sq = tape.mul(support, support)?;
    let weighted_sq = tape.mul(sq, row_mass)?;
    let quad = tape.sum(weighted_sq)?;
    let cross = tape.mul(support, pulled)?;
    let cross = tape.sum(cross)?;
    let cross = tape.scale(cross, -2.0)?;
    let wmd = tape.add(quad, cross)?;
    let wmd = tape.add(wmd, target_term)?;
    let var = tape.sqrt_floored(wmd, sqrt_guard)?;

    Ok(LossValue {
        var,
        value: scalar(tape, var),
        diagnostics: LossDiagnostics {
            ipot_residual: Some(sol.plan.residual()),
            ipot_converged: Some(sol.converged),
            ..LossDiagnostics::default()
        },
    })
}

/// `sqrt(max(IPOT value, guard))` without a tape.
pub fn wd_value(
    u: &SentenceDistribution,
    v: &SentenceDistribution,
    ipot: &IpotConfig,
    sqrt_guard: f64,
) -> Result<(f64, IpotSolution)> {
    let cost = cost_matrix(u, v)?;
    let sol = ipot_solve(u, v, &cost, ipot)?;
    Ok((sol.value.max(sqrt_guard).sqrt(), sol))
}

/// Empirical Lipschitz ratio `|l(u_a, v) - l(u_b, v)| / |a - b|` of the
/// square-root transport loss through a representation map `repr`.
pub fn lipschitz_probe<F>(
    repr: F,
    theta: &ParamSet,
    theta_prime: &ParamSet,
    target: &SentenceDistribution,
    ipot: &IpotConfig,
    sqrt_guard: f64,
) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<SentenceDistribution>,
{
    let dist = theta.distance(theta_prime)?;
    if dist == 0.0 {
        return Err(invalid("lipschitz probe needs distinct parameter points"));
    }
    let (a, _) = wd_value(&repr(theta)?, target, ipot, sqrt_guard)?;
    let (b, _) = wd_value(&repr(theta_prime)?, target, ipot, sqrt_guard)?;
    Ok((a - b).abs() / dist)
}

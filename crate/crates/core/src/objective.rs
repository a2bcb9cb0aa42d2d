//! The polar-coordinate view of augmented-sample losses.
//!
//! An augmented loss is rewritten through the law of cosines as
//! `phi(e; r, theta) = sqrt(e^2 + r^2 - 2 e r cos(theta))`, where `e` is the
//! loss of the original sample, `r` the perturbation distance and `theta`
//! the angle at the original prediction. Taking the expectation over a
//! perturbation law and bounding it yields a loss-dependent gradient weight.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::euclidean_distance;

const RADICAND_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarPerturbation {
    r: f64,
    theta: f64,
}

impl PolarPerturbation {
    pub fn new(r: f64, theta: f64) -> Result<Self> {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(invalid(format!("radius must be finite and >= 0, got {r}")));
        }
        if !(0.0..=PI).contains(&theta) {
            return Err(invalid(format!("angle must lie in [0, pi], got {theta}")));
        }
        Ok(Self { r, theta })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusLaw {
    /// `r ~ Uniform(0, R)`.
    Uniform,
    /// `r ~ Exp` with mean `R`.
    Exponential,
}

/// Joint law of `(r, theta)`: the radius law above, independent of
/// `theta ~ Uniform(0, pi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationDistribution {
    law: RadiusLaw,
    radius: f64,
}

impl PerturbationDistribution {
    pub fn new(law: RadiusLaw, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(invalid(format!("R must be positive, got {radius}")));
        }
        Ok(Self { law, radius })
    }

    pub fn uniform(radius: f64) -> Result<Self> {
        Self::new(RadiusLaw::Uniform, radius)
    }

    pub fn exponential(radius: f64) -> Result<Self> {
        Self::new(RadiusLaw::Exponential, radius)
    }

    pub fn law(&self) -> RadiusLaw {
        self.law
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

/// `sqrt(e^2 + r^2 - 2 e r cos(theta))`.
pub fn phi(e: f64, p: PolarPerturbation) -> Result<f64> {
    if !(e >= 0.0) {
        return Err(invalid(format!("edge length must be >= 0, got {e}")));
    }
    let rad = e * e + p.r * p.r - 2.0 * e * p.r * p.theta.cos();
    if rad < -RADICAND_SLACK {
        return Err(Error::Numeric(format!("negative radicand {rad}")));
    }
    Ok(rad.max(0.0).sqrt())
}

fn phi_raw(e: f64, r: f64, theta: f64) -> f64 {
    (e * e + r * r - 2.0 * e * r * theta.cos()).max(0.0).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Residual of the law of cosines with pole `a`: the angle is measured at `a`
/// between the rays to `b` and to `c`.
pub fn law_of_cosines_check(a: &[f64], b: &[f64], c: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() != c.len() {
        return Err(Error::Shape("law of cosines needs equal dimensions".into()));
    }
    let (ab, ac) = (diff(b, a), diff(c, a));
    let (nab, nac) = (dot(&ab, &ab).sqrt(), dot(&ac, &ac).sqrt());
    if nab == 0.0 || nac == 0.0 {
        return Err(invalid("angle undefined: pole coincides with an endpoint"));
    }
    let theta = (dot(&ab, &ac) / (nab * nac)).clamp(-1.0, 1.0).acos();
    let bc = diff(c, b);
    let lhs = dot(&bc, &bc);
    let rhs = nab * nab + nac * nac - 2.0 * nab * nac * theta.cos();
    Ok((lhs - rhs).abs())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Monte-Carlo estimate of `E[phi(e; r, theta)]`.
pub fn expected_phi_mc(e: f64, dist: &PerturbationDistribution, n: usize, seed: u64) -> Result<McEstimate> {
    if n < 1000 {
        return Err(invalid(format!("need at least 1000 samples, got {n}")));
    }
    if !(e >= 0.0) {
        return Err(invalid(format!("edge length must be >= 0, got {e}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(1.0 / dist.radius).map_err(|err| invalid(err.to_string()))?;
    // Welford accumulation keeps the variance stable at n = 1e6.
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 1..=n {
        let r = match dist.law {
            RadiusLaw::Uniform => rng.random_range(0.0..dist.radius),
            RadiusLaw::Exponential => exp.sample(&mut rng),
        };
        let theta = rng.random_range(0.0..PI);
        let x = phi_raw(e, r, theta);
        let delta = x - mean;
        mean += delta / k as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (n - 1) as f64;
    Ok(McEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
    })
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn integrate_panels<F: Fn(f64) -> f64>(f: F, breaks: &[f64], rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    breaks
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let (half, mid) = ((b - a) / 2.0, (a + b) / 2.0);
            rule.0
                .iter()
                .zip(&rule.1)
                .map(|(x, wt)| wt * f(mid + half * x))
                .sum::<f64>()
                * half
        })
        .sum()
}

pub const ANGULAR_NODES: usize = 64;
pub const UNIFORM_RADIAL_NODES: usize = 64;
pub const EXPONENTIAL_RADIAL_NODES: usize = 128;
/// The exponential radial integral is cut at this multiple of the mean.
pub const EXPONENTIAL_TRUNCATION: f64 = 20.0;

/// Tensor-product Gauss-Legendre value of `E[phi(e; r, theta)]`.
///
/// The radial range is split at `r = e` when that point is interior, since
/// the integrand is only Lipschitz there.
pub fn expected_phi_quadrature(e: f64, dist: &PerturbationDistribution) -> Result<f64> {
    if !(e >= 0.0) {
        return Err(invalid(format!("edge length must be >= 0, got {e}")));
    }
    let r_max = dist.radius;
    let (hi, radial_nodes) = match dist.law {
        RadiusLaw::Uniform => (r_max, UNIFORM_RADIAL_NODES),
        RadiusLaw::Exponential => (EXPONENTIAL_TRUNCATION * r_max, EXPONENTIAL_RADIAL_NODES),
    };
    let breaks: Vec<f64> = if e > 0.0 && e < hi { vec![0.0, e, hi] } else { vec![0.0, hi] };
    let angular = gauss_legendre(ANGULAR_NODES);
    let radial = gauss_legendre(radial_nodes);
    let density = |r: f64| match dist.law {
        RadiusLaw::Uniform => 1.0 / r_max,
        RadiusLaw::Exponential => (-r / r_max).exp() / r_max,
    };
    let inner = |r: f64| integrate_panels(|t| phi_raw(e, r, t), &[0.0, PI], &angular) / PI;
    Ok(integrate_panels(|r| density(r) * inner(r), &breaks, &radial))
}

/// Closed-form upper bound for uniform `(r, theta)`:
/// `e/2 + e^2/4 + (R^2/12 + R/4 + 1/4)`.
pub fn corollary1_bound(e: f64, radius: f64) -> Result<f64> {
    check_bound_args(e, radius)?;
    Ok(0.5 * e + UNIFORM_C1 * e * e + uniform_c2(radius))
}

pub const UNIFORM_C1: f64 = 0.25;

pub fn uniform_c2(radius: f64) -> f64 {
    radius * radius / 12.0 + radius / 4.0 + 0.25
}

/// Printed constants for the exponential-radius case.
///
/// The derivation behind them integrates `R exp(-r/R)` over `[0, R]`, which
/// is not the exponential density, so the resulting value is not guaranteed
/// to dominate the true expectation (it does not at `e = 0, R = 1`). It is
/// reported alongside quadrature, never treated as a proven bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corollary2Bound {
    pub value: f64,
    pub c1: f64,
    pub c2: f64,
}

pub fn exponential_c1(radius: f64) -> f64 {
    (1.0 - (-1.0f64).exp()) * radius * radius / 2.0
}

pub fn exponential_c2(radius: f64) -> f64 {
    let r2 = radius * radius;
    let r3 = r2 * radius;
    r3 / 2.0 + 3.0 * r2 / 4.0 - (r3 / 2.0 + r2 * r2 / 2.0) * (-1.0f64).exp()
}

pub fn corollary2_bound(e: f64, radius: f64) -> Result<Corollary2Bound> {
    check_bound_args(e, radius)?;
    let (c1, c2) = (exponential_c1(radius), exponential_c2(radius));
    Ok(Corollary2Bound {
        value: c1 * e + c1 / 2.0 * e * e + c2,
        c1,
        c2,
    })
}

fn check_bound_args(e: f64, radius: f64) -> Result<()> {
    if !(e >= 0.0) || !(radius > 0.0) {
        return Err(invalid(format!("need e >= 0 and R > 0, got e={e}, R={radius}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// `3/2 + 2 C1 e`, from the uniform-law bound.
    UniformRule,
    /// `1 + C1(R) (1 + e)`, from the exponential-law bound.
    ExponentialRule,
    None,
}

/// Per-sample gradient weight as a function of the sample's current loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientWeightRule {
    pub kind: WeightKind,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_w1")]
    pub w1: f64,
    #[serde(default = "default_w2")]
    pub w2: f64,
}

fn default_c1() -> f64 {
    UNIFORM_C1
}
fn default_w1() -> f64 {
    0.5
}
fn default_w2() -> f64 {
    5.0
}

impl Default for GradientWeightRule {
    fn default() -> Self {
        Self::uniform()
    }
}

impl GradientWeightRule {
    pub fn uniform() -> Self {
        Self {
            kind: WeightKind::UniformRule,
            c1: UNIFORM_C1,
            w1: default_w1(),
            w2: default_w2(),
        }
    }

    pub fn exponential(c1: f64) -> Self {
        Self {
            kind: WeightKind::ExponentialRule,
            c1,
            ..Self::uniform()
        }
    }

    pub fn none() -> Self {
        Self {
            kind: WeightKind::None,
            ..Self::uniform()
        }
    }

    pub fn with_clip(mut self, w1: f64, w2: f64) -> Self {
        self.w1 = w1;
        self.w2 = w2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w1 > 0.0 && self.w1 <= self.w2 && self.w2.is_finite()) {
            return Err(invalid(format!(
                "clip bounds must satisfy 0 < w1 <= w2, got [{}, {}]",
                self.w1, self.w2
            )));
        }
        if !(self.c1 >= 0.0 && self.c1.is_finite()) {
            return Err(invalid(format!("c1 must be finite and >= 0, got {}", self.c1)));
        }
        Ok(())
    }

    /// Weight before clipping.
    pub fn raw_weight(&self, loss: f64) -> f64 {
        match self.kind {
            WeightKind::UniformRule => 1.5 + 2.0 * self.c1 * loss,
            WeightKind::ExponentialRule => 1.0 + self.c1 * (1.0 + loss),
            WeightKind::None => 1.0,
        }
    }
}

/// Clipped gradient weight for a sample with the given loss value.
pub fn grad_weight(loss_value: f64, rule: &GradientWeightRule) -> f64 {
    rule.raw_weight(loss_value).clamp(rule.w1, rule.w2)
}

/// `l(fx_hat, y_hat)` minus the average of the two triangle-inequality
/// bounds through `y` and through `fx`, with `l` the Euclidean distance.
/// Non-positive whenever the triangle inequality holds.
pub fn paired_bound_check(fx_hat: &[f64], y_hat: &[f64], fx: &[f64], y: &[f64]) -> Result<f64> {
    let l = euclidean_distance;
    let direct = l(fx_hat, y_hat)?;
    let via_y = 0.5 * (l(fx_hat, y)? + l(y, y_hat)?);
    let via_fx = 0.5 * (l(fx_hat, fx)? + l(fx, y_hat)?);
    Ok(direct - (via_y + via_fx))
}

//! Verification suites: seeded invariant checks grouped by topic, each
//! producing report rows with a pass, fail or reported status.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{finite_diff_check, ParamSet, RealArray};
use crate::error::{invalid, Result};
use crate::losses::{euclidean_distance, wd_value, lipschitz_probe, LossKind, DEFAULT_SQRT_GUARD};
use crate::objective::{
    corollary1_bound, corollary2_bound, expected_phi_mc, expected_phi_quadrature, law_of_cosines_check,
    paired_bound_check, GradientWeightRule, PerturbationDistribution,
};
use crate::optimizer::{convergence_harness, LogQuadraticSum};
use crate::seq2seq::{
    forward_teacher_forced, init_model, record_sample_loss, sentence_distribution, LossEmbeddings, ModelConfig,
    TokenSequence, EOS, RESERVED,
};
use crate::transport::{
    exact_1d_oracle, exact_assignment_oracle, exact_w2, ipot_distance, IpotConfig, SentenceDistribution,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Identity,
    Bounds,
    Transport,
    Gradients,
    Convergence,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Identity,
        Suite::Bounds,
        Suite::Transport,
        Suite::Gradients,
        Suite::Convergence,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Identity => "identity",
            Suite::Bounds => "bounds",
            Suite::Transport => "transport",
            Suite::Gradients => "gradients",
            Suite::Convergence => "convergence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// Informational; never fails a suite.
    Reported,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Reported => "reported",
        })
    }
}

/// One line of a suite report. `value` is the measured quantity and `limit`
/// the threshold or reference it is compared with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub suite: Suite,
    pub check: String,
    pub status: Status,
    pub value: f64,
    pub limit: f64,
    pub detail: String,
}

impl CheckRow {
    fn gate(suite: Suite, check: impl Into<String>, ok: bool, value: f64, limit: f64, detail: String) -> Self {
        Self {
            suite,
            check: check.into(),
            status: if ok { Status::Pass } else { Status::Fail },
            value,
            limit,
            detail,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub rows: Vec<CheckRow>,
    pub elapsed_ms: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.status != Status::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| r.status == Status::Fail)
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let start = Instant::now();
    let rows = match suite {
        Suite::Identity => {
            let mut rows = law_of_cosines_rows(1000, 11)?;
            rows.push(paired_bound_row(1000, 12)?);
            rows
        }
        Suite::Bounds => {
            let mut rows = corollary1_rows(1_000_000, 21)?;
            rows.extend(corollary2_rows()?);
            rows
        }
        Suite::Transport => {
            let mut rows = oracle_agreement_rows(100, 100, 31)?;
            rows.extend(metric_axiom_rows(200, 32)?);
            rows.push(euclidean_special_case_row(50, 33)?);
            rows.extend(lipschitz_rows(50, 34)?);
            rows
        }
        Suite::Gradients => gradient_rows(10, 41)?,
        Suite::Convergence => convergence_rows(&[1, 2, 3, 4, 5])?,
    };
    Ok(SuiteReport {
        suite,
        rows,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub const IDENTITY_TOL: f64 = 1e-9;

/// Max law-of-cosines residual over `n` Gaussian triples for each of
/// `d = 2, 16, 64`.
pub fn law_of_cosines_rows(n: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [2, 16, 64]
        .into_iter()
        .map(|d| {
            let mut worst: f64 = 0.0;
            for _ in 0..n {
                let (a, b, c) = (normal_vec(&mut rng, d), normal_vec(&mut rng, d), normal_vec(&mut rng, d));
                worst = worst.max(law_of_cosines_check(&a, &b, &c)?);
            }
            Ok(CheckRow::gate(
                Suite::Identity,
                format!("law_of_cosines d={d}"),
                worst <= IDENTITY_TOL,
                worst,
                IDENTITY_TOL,
                format!("{n} triples"),
            ))
        })
        .collect()
}

/// Largest amount by which the paired perturbation loss exceeds its
/// two-path triangle bound, over `n` Gaussian quadruples.
pub fn paired_bound_row(n: usize, seed: u64) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..n {
        let d = rng.random_range(1..=16);
        let v: Vec<Vec<f64>> = (0..4).map(|_| normal_vec(&mut rng, d)).collect();
        worst = worst.max(paired_bound_check(&v[0], &v[1], &v[2], &v[3])?);
    }
    Ok(CheckRow::gate(
        Suite::Identity,
        "paired_bound",
        worst <= IDENTITY_TOL,
        worst,
        IDENTITY_TOL,
        format!("{n} quadruples; value is max(lhs - bound)"),
    ))
}

pub const BOUND_E: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];
pub const BOUND_R: [f64; 4] = [0.1, 0.5, 1.0, 2.0];

/// Uniform-radius bound against quadrature, with a Monte Carlo cross-check
/// of the quadrature at each grid point.
pub fn corollary1_rows(mc_samples: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (i, &e) in BOUND_E.iter().enumerate() {
        for (j, &r) in BOUND_R.iter().enumerate() {
            let dist = PerturbationDistribution::uniform(r)?;
            let quad = expected_phi_quadrature(e, &dist)?;
            let bound = corollary1_bound(e, r)?;
            let mc = expected_phi_mc(e, &dist, mc_samples, seed + (i * BOUND_R.len() + j) as u64)?;
            let dominated = bound >= quad - 1e-6;
            let agrees = (mc.mean - quad).abs() <= 3.0 * mc.stderr;
            rows.push(CheckRow::gate(
                Suite::Bounds,
                format!("uniform_radius_bound e={e} R={r}"),
                dominated && agrees,
                quad,
                bound,
                format!("mc={:.6} stderr={:.2e}", mc.mean, mc.stderr),
            ));
        }
    }
    Ok(rows)
}

/// Exponential-radius printed bound next to quadrature. Always `reported`;
/// points where the printed bound falls below the expectation are flagged
/// in the detail column.
pub fn corollary2_rows() -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for &e in &BOUND_E {
        for &r in &BOUND_R {
            let quad = expected_phi_quadrature(e, &PerturbationDistribution::exponential(r)?)?;
            let b = corollary2_bound(e, r)?;
            let verdict = if b.value < quad - 1e-6 { "discrepancy" } else { "consistent" };
            rows.push(CheckRow {
                suite: Suite::Bounds,
                check: format!("exponential_radius_bound e={e} R={r}"),
                status: Status::Reported,
                value: quad,
                limit: b.value,
                detail: format!("{verdict}; c1={:.6} c2={:.6}", b.c1, b.c2),
            });
        }
    }
    Ok(rows)
}

pub const ORACLE_REL_TOL: f64 = 1e-3;
pub const AXIOM_TOL: f64 = 1e-9;

fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Scalar support points in `[-1, 1]` with random weights.
pub fn random_1d(rng: &mut ChaCha8Rng) -> Result<SentenceDistribution> {
    let n = rng.random_range(1..=6);
    let points: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let weights = random_weights(rng, n);
    SentenceDistribution::from_points(&points, weights)
}

/// Uniform distribution over `n` points of `[-1, 1]^d`.
pub fn random_uniform_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<SentenceDistribution> {
    let points: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    SentenceDistribution::uniform_points(&points)
}

fn rel_err(approx: f64, exact: f64) -> f64 {
    (approx - exact).abs() / exact.abs().max(1e-12)
}

/// IPOT against the exact 1-D and assignment oracles, plus the monotone
/// value trace after the first five outer steps.
pub fn oracle_agreement_rows(n_1d: usize, n_assign: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = IpotConfig::default();
    let mut worst_rise: f64 = 0.0;
    let mut track = |trace: &[f64]| {
        for w in trace.windows(2).skip(4) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
    };

    let mut worst_1d: f64 = 0.0;
    for _ in 0..n_1d {
        let (u, v) = (random_1d(&mut rng)?, random_1d(&mut rng)?);
        let sol = ipot_distance(&u, &v, &cfg)?;
        worst_1d = worst_1d.max(rel_err(sol.value, exact_1d_oracle(&u, &v)?));
        track(&sol.trace);
    }
    let mut worst_assign: f64 = 0.0;
    for _ in 0..n_assign {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(2..=4);
        let (u, v) = (random_uniform_cloud(&mut rng, n, d)?, random_uniform_cloud(&mut rng, n, d)?);
        let sol = ipot_distance(&u, &v, &cfg)?;
        worst_assign = worst_assign.max(rel_err(sol.value, exact_assignment_oracle(&u, &v)?));
        track(&sol.trace);
    }
    Ok(vec![
        CheckRow::gate(
            Suite::Transport,
            "ipot_vs_quantile_oracle",
            worst_1d <= ORACLE_REL_TOL,
            worst_1d,
            ORACLE_REL_TOL,
            format!("{n_1d} instances; max relative error"),
        ),
        CheckRow::gate(
            Suite::Transport,
            "ipot_vs_assignment_oracle",
            worst_assign <= ORACLE_REL_TOL,
            worst_assign,
            ORACLE_REL_TOL,
            format!("{n_assign} instances; max relative error"),
        ),
        CheckRow::gate(
            Suite::Transport,
            "ipot_trace_monotone",
            worst_rise <= AXIOM_TOL,
            worst_rise,
            AXIOM_TOL,
            "max increase per outer step after step 5".into(),
        ),
    ])
}

/// Symmetry, identity and triangle inequality of the exact `W_2` on `n`
/// triples drawn alternately from the 1-D and assignment families.
pub fn metric_axiom_rows(n: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sym, mut ident, mut tri): (f64, f64, f64) = (0.0, 0.0, f64::NEG_INFINITY);
    for k in 0..n {
        let (u, v, w) = if k % 2 == 0 {
            (random_1d(&mut rng)?, random_1d(&mut rng)?, random_1d(&mut rng)?)
        } else {
            let size = rng.random_range(1..=5);
            let d = rng.random_range(2..=3);
            (
                random_uniform_cloud(&mut rng, size, d)?,
                random_uniform_cloud(&mut rng, size, d)?,
                random_uniform_cloud(&mut rng, size, d)?,
            )
        };
        let (uv, vu) = (exact_w2(&u, &v)?, exact_w2(&v, &u)?);
        sym = sym.max((uv - vu).abs());
        ident = ident.max(exact_w2(&u, &u)?);
        tri = tri.max(exact_w2(&u, &w)? - (uv + exact_w2(&v, &w)?));
    }
    let detail = format!("{n} triples");
    Ok(vec![
        CheckRow::gate(Suite::Transport, "w2_symmetry", sym <= AXIOM_TOL, sym, AXIOM_TOL, detail.clone()),
        CheckRow::gate(Suite::Transport, "w2_identity", ident <= AXIOM_TOL, ident, AXIOM_TOL, detail.clone()),
        CheckRow::gate(
            Suite::Transport,
            "w2_triangle",
            tri <= AXIOM_TOL,
            tri,
            AXIOM_TOL,
            format!("{detail}; value is max(lhs - rhs)"),
        ),
    ])
}

/// For single-point distributions the transport loss is the Euclidean
/// distance.
pub fn euclidean_special_case_row(n: usize, seed: u64) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ipot = IpotConfig::for_loss();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let d = rng.random_range(1..=8);
        let (a, b) = (normal_vec(&mut rng, d), normal_vec(&mut rng, d));
        let u = SentenceDistribution::uniform_points(std::slice::from_ref(&a))?;
        let v = SentenceDistribution::uniform_points(std::slice::from_ref(&b))?;
        let (wd, _) = wd_value(&u, &v, &ipot, DEFAULT_SQRT_GUARD)?;
        worst = worst.max((wd - euclidean_distance(&a, &b)?).abs());
    }
    Ok(CheckRow::gate(
        Suite::Transport,
        "wd_point_mass_is_euclidean",
        worst <= 1e-6,
        worst,
        1e-6,
        format!("{n} pairs"),
    ))
}

pub const LIPSCHITZ_SCALES: [f64; 3] = [1e-1, 1e-2, 1e-3];

fn tiny_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 6,
        embed_dim: 4,
        hidden_dim: 5,
        max_len: 3,
        init_range: 0.5,
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<TokenSequence> {
    let n = rng.random_range(0..cfg.max_len);
    let content = (0..n).map(|_| rng.random_range(RESERVED..cfg.vocab_size)).collect();
    let seq = TokenSequence::terminated(content, cfg.vocab_size)?;
    debug_assert_eq!(seq.tokens().last(), Some(&EOS));
    Ok(seq)
}

fn perturbed(rng: &mut ChaCha8Rng, p: &ParamSet, scale: f64) -> Result<ParamSet> {
    let dir: ParamSet = p
        .iter()
        .map(|(name, v)| {
            let noise = (0..v.len()).map(|_| rng.sample(StandardNormal)).collect();
            Ok((name.to_string(), RealArray::new(v.shape().to_vec(), noise)?))
        })
        .collect::<Result<_>>()?;
    let mut q = p.clone();
    q.add_scaled(&dir, scale / dir.norm_sq().sqrt())?;
    Ok(q)
}

/// Empirical Lipschitz ratio of the transport loss through the model's
/// predicted sentence distribution, at three perturbation scales. The
/// ratios are reported; the gate is that they are finite and agree across
/// scales to within a factor of ten.
pub fn lipschitz_rows(n: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let cfg = tiny_model();
    let emb = LossEmbeddings::random(cfg.vocab_size, 3, seed)?;
    let ipot = IpotConfig::for_loss();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maxima = Vec::new();
    let mut rows = Vec::new();
    for &scale in &LIPSCHITZ_SCALES {
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let p = init_model(&cfg, seed + k as u64)?;
            let q = perturbed(&mut rng, &p, scale)?;
            let (x, y) = (random_sequence(&mut rng, &cfg)?, random_sequence(&mut rng, &cfg)?);
            let target = emb.target_distribution(&y)?;
            let repr = |theta: &ParamSet| sentence_distribution(&forward_teacher_forced(theta, &cfg, &x, &y)?, &emb);
            worst = worst.max(lipschitz_probe(repr, &p, &q, &target, &ipot, DEFAULT_SQRT_GUARD)?);
        }
        maxima.push(worst);
        rows.push(CheckRow {
            suite: Suite::Transport,
            check: format!("lipschitz_ratio scale={scale}"),
            status: Status::Reported,
            value: worst,
            limit: f64::NAN,
            detail: format!("max over {n} seeded probes"),
        });
    }
    let (lo, hi) = maxima.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &m| (a.min(m), b.max(m)));
    let spread = hi / lo;
    rows.push(CheckRow::gate(
        Suite::Transport,
        "lipschitz_ratio_stable",
        spread.is_finite() && spread < 10.0,
        spread,
        10.0,
        "max/min of the per-scale maxima".into(),
    ));
    Ok(rows)
}

pub const CE_GRAD_TOL: f64 = 1e-5;
pub const WD_GRAD_TOL: f64 = 1e-2;

/// End-to-end finite-difference agreement of model-plus-loss gradients on
/// `n` tiny seeded instances per loss.
pub fn gradient_rows(n: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let cfg = tiny_model();
    let emb = LossEmbeddings::random(cfg.vocab_size, 3, seed)?;
    let mut rows = Vec::new();
    for (loss, tol) in [
        (LossKind::CrossEntropy, CE_GRAD_TOL),
        (LossKind::Euclidean, CE_GRAD_TOL),
        (LossKind::wd(), WD_GRAD_TOL),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let p = init_model(&cfg, seed + k as u64)?;
            let (x, y) = (random_sequence(&mut rng, &cfg)?, random_sequence(&mut rng, &cfg)?);
            let err = finite_diff_check(
                &p,
                |t, b| Ok(record_sample_loss(t, b, &cfg, &loss, &emb, &x, &y)?.var),
                1e-5,
            )?;
            worst = worst.max(err);
        }
        rows.push(CheckRow::gate(
            Suite::Gradients,
            format!("end_to_end_fd {}", loss.name()),
            worst <= tol,
            worst,
            tol,
            format!("{n} instances; max relative error"),
        ));
    }
    Ok(rows)
}

pub const RATE_HORIZONS: [usize; 4] = [100, 400, 1600, 6400];
pub const RATE_WINDOW: (f64, f64) = (-0.75, -0.25);

/// Rate of `min_t E|grad|^2` in `T` under the uniform rule clipped to
/// `[0.5, 5]`, with `alpha = 2 / sqrt(T)`.
pub fn convergence_rows(seeds: &[u64]) -> Result<Vec<CheckRow>> {
    let problem = LogQuadraticSum::new(50, 20, 0.5, 42);
    let rule = GradientWeightRule::uniform().with_clip(0.5, 5.0);
    let report = convergence_harness(&problem, &RATE_HORIZONS, seeds, 2.0, &rule)?;
    let mut rows: Vec<CheckRow> = report
        .records
        .iter()
        .map(|r| CheckRow {
            suite: Suite::Convergence,
            check: format!("min_grad_norm_sq T={}", r.total_t),
            status: Status::Reported,
            value: r.min_grad_norm_sq,
            limit: f64::NAN,
            detail: format!("lr={:.5}", r.lr),
        })
        .collect();
    let (lo, hi) = RATE_WINDOW;
    rows.push(CheckRow::gate(
        Suite::Convergence,
        "rate_slope",
        (lo..=hi).contains(&report.slope),
        report.slope,
        -0.5,
        format!("window [{lo}, {hi}] over {} seeds", seeds.len()),
    ));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()).unwrap(), s);
        }
        assert!(Suite::parse("everything").is_err());
    }

    #[test]
    fn small_identity_rows_pass() {
        let rows = law_of_cosines_rows(50, 1).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.status == Status::Pass));
        assert_eq!(paired_bound_row(50, 2).unwrap().status, Status::Pass);
    }

    #[test]
    fn exponential_bound_flags_the_unit_radius_origin() {
        let rows = corollary2_rows().unwrap();
        assert!(rows.iter().all(|r| r.status == Status::Reported));
        let row = rows.iter().find(|r| r.check == "exponential_radius_bound e=0 R=1").unwrap();
        assert!((row.value - 1.0).abs() < 1e-6);
        assert!((row.limit - 0.882).abs() < 1e-3);
        assert!(row.detail.starts_with("discrepancy"));
    }

    #[test]
    fn failures_are_collected() {
        let report = SuiteReport {
            suite: Suite::Identity,
            rows: vec![
                CheckRow::gate(Suite::Identity, "a", true, 0.0, 1.0, String::new()),
                CheckRow::gate(Suite::Identity, "b", false, 2.0, 1.0, String::new()),
            ],
            elapsed_ms: 0.0,
        };
        assert!(!report.passed());
        assert_eq!(report.failures().map(|r| r.check.as_str()).collect::<Vec<_>>(), ["b"]);
    }
}

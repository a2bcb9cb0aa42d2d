//! `compare`: a methods × seeds matrix on one task and loss, with the
//! augmentation weight tuned on dev, summarized per method.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use augweight_core::{EvalMetrics, Method, Schedule};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::commands::{cmd_train, ensure_dir};
use crate::config::{parse_table, run_config_from_table, RunConfig};
use crate::error::{CliError, CliResult};
use crate::metrics::write_table;

pub const DEFAULT_WEIGHT_SWEEP: [f64; 4] = [0.1, 0.3, 0.5, 1.0];

fn default_sweep() -> Vec<f64> {
    DEFAULT_WEIGHT_SWEEP.to_vec()
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub label: String,
    pub method: Method,
    /// Pick `weight_w` from the sweep by final dev token accuracy on the
    /// first seed. Only meaningful for `augment`.
    #[serde(default)]
    pub tune_w: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareMatrix {
    pub seeds: Vec<u64>,
    #[serde(default = "default_sweep")]
    pub weight_sweep: Vec<f64>,
    /// Divide the learning-rate constant of `ours` runs by the rule's upper
    /// clip `w2`, so its largest step matches the other methods' step.
    #[serde(default = "yes")]
    pub scale_ours_lr: bool,
    /// A run config without `method`; `optim.seed` is set per run.
    pub base: Table,
    #[serde(default)]
    pub methods: Vec<MethodEntry>,
}

impl CompareMatrix {
    pub fn parse(text: &str) -> CliResult<Self> {
        Value::Table(parse_table(text)?)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        if self.methods.is_empty() {
            return bad("matrix lists no methods");
        }
        if self.seeds.is_empty() {
            return bad("matrix lists no seeds");
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].iter().any(|o| o.label == m.label) {
                return bad(&format!("duplicate method label {:?}", m.label));
            }
            if m.tune_w && !matches!(m.method, Method::Augment(_)) {
                return bad(&format!("{}: tune_w needs an augment method", m.label));
            }
        }
        if self.methods.iter().any(|m| m.tune_w)
            && (self.weight_sweep.is_empty() || self.weight_sweep.iter().any(|w| !(*w > 0.0)))
        {
            return bad("weight_sweep must be non-empty and positive");
        }
        if self.base.contains_key("method") {
            return bad("base must not set method; list methods instead");
        }
        Ok(())
    }

    /// The run config for one cell.
    pub fn cell(&self, method: &Method, seed: u64) -> CliResult<RunConfig> {
        let mut table = self.base.clone();
        let method_value = Value::try_from(method).map_err(|e| CliError::Config(e.to_string()))?;
        table.insert("method".into(), method_value);
        let mut cfg = run_config_from_table(table, &[format!("optim.seed={seed}")])?;
        if let (Method::Ours(rule), true) = (method, self.scale_ours_lr) {
            cfg.optim.schedule = match cfg.optim.schedule {
                Schedule::ConstantOverSqrtT { c } => Schedule::ConstantOverSqrtT { c: c / rule.w2 },
                Schedule::StartThenHalve { lr0, halve_after_epoch } => Schedule::StartThenHalve {
                    lr0: lr0 / rule.w2,
                    halve_after_epoch,
                },
            };
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub label: String,
    pub method: String,
    pub seed: u64,
    pub weight_w: Option<f64>,
    pub lr: f64,
    pub dev_token_acc: f64,
    pub test_token_acc: f64,
    pub test_seq_acc: f64,
    pub test_loss: f64,
    pub wall_ms: f64,
    pub samples_per_epoch: usize,
    pub samples_processed: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub label: String,
    pub weight_w: f64,
    pub seed: u64,
    pub dev_token_acc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodSummary {
    pub label: String,
    pub method: String,
    pub runs: usize,
    pub token_acc_mean: f64,
    pub token_acc_std: f64,
    pub seq_acc_mean: f64,
    pub seq_acc_std: f64,
    pub wall_ms_mean: f64,
    pub samples_per_epoch: usize,
    pub samples_processed_mean: f64,
    pub weight_w: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct CompareSummary {
    pub methods: Vec<MethodSummary>,
    pub runs: Vec<RunResult>,
    pub sweep: Vec<SweepPoint>,
}

impl CompareSummary {
    pub fn method(&self, label: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.label == label)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn learning_rate(cfg: &RunConfig) -> f64 {
    match cfg.optim.schedule {
        Schedule::ConstantOverSqrtT { c } => c,
        Schedule::StartThenHalve { lr0, .. } => lr0,
    }
}

fn run_cell(label: &str, cfg: &RunConfig, dir: PathBuf) -> CliResult<RunResult> {
    let outcome = cmd_train(cfg, &dir)?;
    let last = outcome.epochs.last().expect("epochs >= 1");
    let EvalMetrics { loss, token_acc, seq_acc } = outcome.test;
    Ok(RunResult {
        label: label.into(),
        method: cfg.method.name().into(),
        seed: cfg.optim.seed,
        weight_w: match cfg.method {
            Method::Augment(a) => Some(a.weight_w),
            _ => None,
        },
        lr: learning_rate(cfg),
        dev_token_acc: last.dev.token_acc,
        test_token_acc: token_acc,
        test_seq_acc: seq_acc,
        test_loss: loss,
        wall_ms: outcome.epochs.iter().map(|e| e.wall_ms).sum(),
        samples_per_epoch: last.samples,
        samples_processed: outcome.samples_processed,
    })
}

fn with_weight(method: &Method, w: f64) -> Method {
    match method {
        Method::Augment(a) => Method::Augment(augweight_core::AugmentSpec { weight_w: w, ..*a }),
        other => *other,
    }
}

/// Runs every cell sequentially. Each run writes into
/// `out/runs/<label>[-w<w>]-s<seed>/`; `progress` sees one line per run.
pub fn run_matrix<F: FnMut(&str)>(matrix: &CompareMatrix, out: &Path, mut progress: F) -> CliResult<CompareSummary> {
    matrix.validate()?;
    let runs_dir = out.join("runs");
    ensure_dir(&runs_dir)?;
    let mut runs = Vec::new();
    let mut sweep = Vec::new();
    let mut summaries = Vec::new();

    for entry in &matrix.methods {
        let mut mine: Vec<RunResult> = Vec::new();
        let mut method = entry.method;
        let mut seeds: &[u64] = &matrix.seeds;
        if entry.tune_w {
            let seed = matrix.seeds[0];
            let mut best: Option<RunResult> = None;
            for &w in &matrix.weight_sweep {
                let cfg = matrix.cell(&with_weight(&entry.method, w), seed)?;
                let r = run_cell(&entry.label, &cfg, runs_dir.join(format!("{}-w{w}-s{seed}", entry.label)))?;
                progress(&format!("{} w={w} seed={seed}: dev token acc {:.4}", entry.label, r.dev_token_acc));
                sweep.push(SweepPoint {
                    label: entry.label.clone(),
                    weight_w: w,
                    seed,
                    dev_token_acc: r.dev_token_acc,
                });
                if best.as_ref().is_none_or(|b| r.dev_token_acc > b.dev_token_acc) {
                    best = Some(r);
                }
            }
            let best = best.expect("sweep is non-empty");
            method = with_weight(&entry.method, best.weight_w.expect("augment run"));
            mine.push(best);
            seeds = &matrix.seeds[1..];
        }
        for &seed in seeds {
            let cfg = matrix.cell(&method, seed)?;
            let r = run_cell(&entry.label, &cfg, runs_dir.join(format!("{}-s{seed}", entry.label)))?;
            progress(&format!(
                "{} seed={seed}: test token acc {:.4}, {} samples",
                entry.label, r.test_token_acc, r.samples_processed
            ));
            mine.push(r);
        }
        let acc: Vec<f64> = mine.iter().map(|r| r.test_token_acc).collect();
        let seq: Vec<f64> = mine.iter().map(|r| r.test_seq_acc).collect();
        let (token_acc_mean, token_acc_std) = mean_std(&acc);
        let (seq_acc_mean, seq_acc_std) = mean_std(&seq);
        summaries.push(MethodSummary {
            label: entry.label.clone(),
            method: entry.method.name().into(),
            runs: mine.len(),
            token_acc_mean,
            token_acc_std,
            seq_acc_mean,
            seq_acc_std,
            wall_ms_mean: mean_std(&mine.iter().map(|r| r.wall_ms).collect::<Vec<_>>()).0,
            samples_per_epoch: mine[0].samples_per_epoch,
            samples_processed_mean: mean_std(&mine.iter().map(|r| r.samples_processed as f64).collect::<Vec<_>>()).0,
            weight_w: mine[0].weight_w,
            lr: mine[0].lr,
        });
        runs.extend(mine);
    }

    let summary = CompareSummary {
        methods: summaries,
        runs,
        sweep,
    };
    write_outputs(&summary, out)?;
    Ok(summary)
}

fn create(path: PathBuf) -> CliResult<std::fs::File> {
    std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))
}

fn write_outputs(s: &CompareSummary, out: &Path) -> CliResult<()> {
    write_table(create(out.join("summary.csv"))?, &s.methods)?;
    write_table(create(out.join("runs.csv"))?, &s.runs)?;
    if !s.sweep.is_empty() {
        write_table(create(out.join("sweep.csv"))?, &s.sweep)?;
    }
    let path = out.join("summary.txt");
    std::fs::write(&path, render_summary(s)).map_err(|e| CliError::io(&path, e))
}

pub fn render_summary(s: &CompareSummary) -> String {
    let mut t = String::new();
    let _ = writeln!(
        t,
        "{:<10} {:<8} {:>4} {:>17} {:>17} {:>11} {:>10} {:>8} {:>9}",
        "label", "method", "runs", "token_acc", "seq_acc", "wall_s/run", "samples/ep", "w", "lr"
    );
    for m in &s.methods {
        let w = m.weight_w.map_or("-".to_string(), |w| w.to_string());
        let _ = writeln!(
            t,
            "{:<10} {:<8} {:>4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>11.1} {:>10} {:>8} {:>9.2e}",
            m.label,
            m.method,
            m.runs,
            m.token_acc_mean,
            m.token_acc_std,
            m.seq_acc_mean,
            m.seq_acc_std,
            m.wall_ms_mean / 1e3,
            m.samples_per_epoch,
            w,
            m.lr
        );
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use augweight_core::GradientWeightRule;

    const MATRIX: &str = r#"
seeds = [1, 2]

[base]
loss = { kind = "cross_entropy" }
task = { kind = "copy", seed = 2, content_vocab = 6, len_range = [2, 3], sizes = { train = 30, dev = 10, test = 10 } }
model = { embed_dim = 6, hidden_dim = 8, init_range = 0.3 }
optim = { epochs = 2, batch_size = 2, schedule = { kind = "start_then_halve", lr0 = 0.01, halve_after_epoch = 1 } }

[[methods]]
label = "base"
method = "base"

[[methods]]
label = "ours"
method = { ours = { kind = "uniform_rule" } }
"#;

    #[test]
    fn cells_set_seed_and_scale_ours() {
        let m = CompareMatrix::parse(MATRIX).unwrap();
        m.validate().unwrap();
        let base = m.cell(&Method::Base, 2).unwrap();
        assert_eq!(base.optim.seed, 2);
        let ours = m.cell(&Method::Ours(GradientWeightRule::uniform()), 2).unwrap();
        assert_eq!(learning_rate(&ours), 0.01 / 5.0);
        let plain = CompareMatrix {
            scale_ours_lr: false,
            ..m.clone()
        };
        assert_eq!(learning_rate(&plain.cell(&ours.method, 2).unwrap()), 0.01);
    }

    #[test]
    fn empty_or_inconsistent_matrices_are_config_errors() {
        let mut m = CompareMatrix::parse(MATRIX).unwrap();
        m.methods.clear();
        assert!(matches!(m.validate(), Err(CliError::Config(_))));
        let mut m = CompareMatrix::parse(MATRIX).unwrap();
        m.seeds.clear();
        assert!(matches!(m.validate(), Err(CliError::Config(_))));
        let mut m = CompareMatrix::parse(MATRIX).unwrap();
        m.methods[1].tune_w = true;
        assert!(matches!(m.validate(), Err(CliError::Config(_))));
        let mut m = CompareMatrix::parse(MATRIX).unwrap();
        m.methods[1].label = "base".into();
        assert!(matches!(m.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_std(&[1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}

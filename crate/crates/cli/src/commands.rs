//! `train` and `verify`.

use std::path::{Path, PathBuf};

use augweight_core::corpus::generate_task;
use augweight_core::seq2seq::write_checkpoint;
use augweight_core::suites::{run_suite, Status, Suite, SuiteReport};
use augweight_core::training::train;
use augweight_core::TrainOutcome;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::metrics::{write_table, MetricsRow, MetricsWriter};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn resolve_out(cli_out: Option<PathBuf>, cfg: &RunConfig) -> CliResult<PathBuf> {
    cli_out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))
}

/// Trains one run into `out`: the resolved config, a metrics row per epoch
/// and the final checkpoint.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    ensure_dir(out)?;
    let resolved = out.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&resolved, cfg.to_toml()?).map_err(|e| CliError::io(&resolved, e))?;
    let data = generate_task(&cfg.task)?;
    let mut writer = MetricsWriter::create(&out.join(METRICS_FILE))?;
    let mut write_err = None;
    let outcome = train(&cfg.train_config(), &data, |record| {
        if write_err.is_none() {
            write_err = writer.write(&MetricsRow::new(cfg, record)).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    write_checkpoint(&out.join(CHECKPOINT_FILE), &cfg.model, &outcome.params)?;
    Ok(outcome)
}

#[derive(serde::Serialize)]
struct ReportLine<'a> {
    suite: &'a str,
    check: &'a str,
    status: String,
    value: f64,
    limit: f64,
    detail: &'a str,
}

pub fn write_report(path: &Path, reports: &[SuiteReport]) -> CliResult<()> {
    let lines: Vec<ReportLine> = reports
        .iter()
        .flat_map(|r| &r.rows)
        .map(|row| ReportLine {
            suite: row.suite.name(),
            check: &row.check,
            status: row.status.to_string(),
            value: row.value,
            limit: row.limit,
            detail: &row.detail,
        })
        .collect();
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_table(file, &lines)
}

pub fn render_report(report: &SuiteReport) -> String {
    let width = report.rows.iter().map(|r| r.check.len()).max().unwrap_or(0);
    let mut s = String::new();
    for row in &report.rows {
        s.push_str(&format!(
            "{:<8} {:<width$}  value={:<12.6e} limit={:<12.6e} {}\n",
            row.status.to_string(),
            row.check,
            row.value,
            row.limit,
            row.detail
        ));
    }
    s.push_str(&format!("{}: {:.0} ms\n", report.suite.name(), report.elapsed_ms));
    s
}

/// Runs the named suites (or all five for `"all"`), writes
/// `verify-<name>.csv` into `out`, and fails listing every failed check.
pub fn cmd_verify(name: &str, out: &Path) -> CliResult<Vec<SuiteReport>> {
    let suites = if name == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![Suite::parse(name).map_err(|e| CliError::Config(e.to_string()))?]
    };
    ensure_dir(out)?;
    let reports = suites.into_iter().map(run_suite).collect::<Result<Vec<_>, _>>()?;
    write_report(&out.join(format!("verify-{name}.csv")), &reports)?;
    for r in &reports {
        print!("{}", render_report(r));
    }
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| r.failures())
        .map(|row| format!("{} {}: {} (limit {})", row.suite.name(), row.check, row.value, row.limit))
        .collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::Verify(failed.join("\n")))
    }
}

pub fn count_status(reports: &[SuiteReport], status: Status) -> usize {
    reports.iter().flat_map(|r| &r.rows).filter(|r| r.status == status).count()
}

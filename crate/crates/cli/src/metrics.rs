//! Per-epoch metrics CSV.

use std::io::Write;
use std::path::Path;

use augweight_core::EpochRecord;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const METRICS_HEADER: &str = "run_id,task,loss_kind,method,seed,epoch,train_loss,dev_loss,token_acc,seq_acc,wall_ms";

/// Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub task: String,
    pub loss_kind: String,
    pub method: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub token_acc: f64,
    pub seq_acc: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn new(cfg: &RunConfig, record: &EpochRecord) -> Self {
        Self {
            run_id: cfg.run_id(),
            task: cfg.task.kind.name().into(),
            loss_kind: cfg.loss.name().into(),
            method: cfg.method.name().into(),
            seed: cfg.optim.seed,
            epoch: record.epoch,
            train_loss: record.train_loss,
            dev_loss: record.dev.loss,
            token_acc: record.dev.token_acc,
            seq_acc: record.dev.seq_acc,
            wall_ms: record.wall_ms,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let frac = 0.0..=1.0;
        if self.epoch < 1 || !frac.contains(&self.token_acc) || !frac.contains(&self.seq_acc) {
            return Err(CliError::Config(format!("metrics row out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Streams rows to a CSV file, flushing after each so a crashed run keeps
/// every finished epoch.
pub struct MetricsWriter {
    inner: csv::Writer<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> CliResult<Self> {
        let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        let inner = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> CliResult<()> {
        row.validate()?;
        self.inner.serialize(row)?;
        self.inner.flush().map_err(|e| CliError::Io {
            path: "metrics".into(),
            source: e,
        })
    }
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(CliError::Config(format!(
            "{} has header {:?}, expected {METRICS_HEADER}",
            path.display(),
            header.join(",")
        )));
    }
    reader.deserialize().map(|r| r.map_err(CliError::from)).collect()
}

/// Writes `rows` as CSV, header taken from the field names, LF line endings.
pub fn write_table<W: Write, S: Serialize>(out: W, rows: &[S]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::Io {
        path: "table".into(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize) -> MetricsRow {
        MetricsRow {
            run_id: "copy-cross_entropy-base-s1".into(),
            task: "copy".into(),
            loss_kind: "cross_entropy".into(),
            method: "base".into(),
            seed: 1,
            epoch,
            train_loss: 1.25,
            dev_loss: 0.1 + epoch as f64,
            token_acc: 0.5,
            seq_acc: 0.125,
            wall_ms: 12.5,
        }
    }

    #[test]
    fn csv_round_trips_with_exact_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        for e in 1..=3 {
            w.write(&row(e)).unwrap();
        }
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
        assert!(!text.contains('\r'));
        assert_eq!(read_metrics(&path).unwrap(), (1..=3).map(row).collect::<Vec<_>>());
    }

    #[test]
    fn out_of_range_rows_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(&dir.path().join("m.csv")).unwrap();
        assert!(w.write(&MetricsRow { token_acc: 1.5, ..row(1) }).is_err());
        assert!(w.write(&row(0)).is_err());
    }

    #[test]
    fn foreign_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(read_metrics(&path).is_err());
    }
}

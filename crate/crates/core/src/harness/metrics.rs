//! JSON-lines metrics stream.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ValMetric;
use crate::error::Result;
use crate::losses::LossReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub split: Split,
    /// The configured objective.
    pub loss: f64,
    pub masked_l2: f64,
    /// Batch-mean MVC terms; absent for the L2 objective.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<LossReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mvc_soft: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mvc_surf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

impl MetricsRecord {
    pub fn metric(&self, m: ValMetric) -> Option<f64> {
        match m {
            ValMetric::MaskedL2 => Some(self.masked_l2),
            ValMetric::Loss => Some(self.loss),
            ValMetric::MvcSoft => self.mvc_soft,
            ValMetric::MvcSurf => self.mvc_surf,
        }
    }
}

/// Single appender for a run. Keeps every line in memory and mirrors it to
/// a file when one is attached; each line is flushed as it is written.
#[derive(Debug, Default)]
pub struct MetricsSink {
    records: Vec<MetricsRecord>,
    lines: Vec<String>,
    file: Option<BufWriter<File>>,
}

impl MetricsSink {
    pub fn memory() -> Self {
        MetricsSink::default()
    }

    pub fn to_file(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(MetricsSink {
            file: Some(BufWriter::new(file)),
            ..MetricsSink::default()
        })
    }

    fn write_line(&mut self, line: String) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn push(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.write_line(serde_json::to_string(rec)?)?;
        self.records.push(rec.clone());
        Ok(())
    }

    /// Diagnostic record for a run stopped by a non-finite value.
    pub fn abort(&mut self, step: u64, tensor: &str) -> Result<()> {
        let line = serde_json::json!({ "step": step, "split": "abort", "tensor": tensor }).to_string();
        self.write_line(line)
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

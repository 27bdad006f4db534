//! Per-step training metrics as line-delimited JSON: one self-describing
//! record per step.
//!
//! The wall-clock field is measured and reported on stderr but not written
//! to the metrics stream, so seeded runs emit byte-identical files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use distill_core::distill::LossBreakdown;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Present only on steps where validation ran.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_cer: Option<f64>,
    /// Measured per step; excluded from the serialized stream.
    #[serde(skip)]
    pub wall_ms: u64,
}

pub struct MetricsWriter {
    writer: BufWriter<File>,
    records: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        Ok(MetricsWriter {
            writer: BufWriter::new(File::create(path)?),
            records: 0,
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.writer, "{line}")?;
        self.records += 1;
        Ok(())
    }

    pub fn records_written(&self) -> usize {
        self.records
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::Core(distill_core::Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })
        })?;
        records.push(record);
    }
    Ok(records)
}

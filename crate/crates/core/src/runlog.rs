//! Append-only run logging: metrics as JSON Lines plus the overhead table
//! as CSV, and the reader side used by the run summarizer.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::hex;
use crate::error::{Error, Result};
use crate::metrics::OverheadCell;

/// One metrics event. `step` is the global batch counter, zero for
/// epoch-level records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub epoch: usize,
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub timesteps: usize,
    pub mode: String,
    pub wall_ms: u64,
}

/// Stable run identity: fingerprint prefix plus the effective seed.
pub fn run_id(fingerprint: &[u8; 32], seed: u64) -> String {
    format!("{}-s{}", hex(&fingerprint[..4]), seed)
}

pub struct RunLog {
    out: BufWriter<File>,
    path: PathBuf,
    run_id: String,
    started: Instant,
}

impl RunLog {
    /// Open (appending) `metrics.jsonl` inside the run directory, creating
    /// the directory as needed.
    pub fn create(dir: &Path, run_id: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("metrics.jsonl");
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(RunLog {
            out: BufWriter::new(file),
            path,
            run_id: run_id.to_string(),
            started: Instant::now(),
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn emit(
        &mut self,
        epoch: usize,
        step: usize,
        split: &str,
        metric: &str,
        value: f64,
        timesteps: usize,
        mode: &str,
    ) -> Result<()> {
        let rec = MetricRecord {
            run_id: self.run_id.clone(),
            epoch,
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            timesteps,
            mode: mode.to_string(),
            wall_ms: self.started.elapsed().as_millis() as u64,
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Format(format!("metrics encoding: {e}")))?;
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for RunLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Read every record of a metrics file; malformed lines are format errors.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Write the overhead table with its fixed header.
pub fn write_overhead_csv(path: &Path, cells: &[OverheadCell]) -> Result<()> {
    let mut text = String::from(crate::metrics::OVERHEAD_CSV_HEADER);
    text.push('\n');
    for c in cells {
        text.push_str(&c.csv_row());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

//! Metrics records and persistence.
//!
//! Two formats: JSON-lines for the full per-step records (plus tagged
//! run-summary and batch-band lines) and a CSV summary of the batch-mean
//! squared Wasserstein distance. Both re-parse to equal structures;
//! floats print in shortest round-trip form, so identical inputs yield
//! byte-identical files. Timestamps never appear in metrics files (the
//! runner confines them to a separate metadata header file).

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::diagnostics::DecayFit;

/// One simulation step of one run. `w2sq` is present only at evaluation
/// steps; `w2_support` records the support size used (subsampled when the
/// empirical support exceeds the cap).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub run: usize,
    pub w2sq: Option<f64>,
    pub w2_support: Option<usize>,
    pub comm_edges: usize,
    pub proj_dist_mean: f64,
    pub obj_mean: f64,
    pub const_term: f64,
    pub input_norm_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub final_w2sq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<DecayFit>,
}

/// Across-run aggregate at one evaluation step (population std).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchBand {
    pub step: usize,
    pub mean_w2sq: f64,
    pub std_w2sq: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<StepRecord>,
    pub run_summaries: Vec<RunSummary>,
    pub bands: Vec<BatchBand>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    /// Plain record lines plus `{"run_summary": ...}` and
    /// `{"band": ...}` tagged lines.
    JsonLines,
    /// `step,mean_w2sq,std_w2sq` rows (bands only).
    CsvSummary,
}

#[derive(Serialize, Deserialize)]
struct TaggedSummary {
    run_summary: RunSummary,
}

#[derive(Serialize, Deserialize)]
struct TaggedBand {
    band: BatchBand,
}

/// Writes the log to `path` in the requested format.
pub fn emit_metrics(log: &MetricsLog, path: &str, format: MetricsFormat) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    match format {
        MetricsFormat::JsonLines => {
            for record in &log.records {
                let line = serde_json::to_string(record)
                    .map_err(|e| Error::MetricsFormat(e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
            }
            for summary in &log.run_summaries {
                let line = serde_json::to_string(&TaggedSummary {
                    run_summary: summary.clone(),
                })
                .map_err(|e| Error::MetricsFormat(e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
            }
            for band in &log.bands {
                let line = serde_json::to_string(&TaggedBand { band: band.clone() })
                    .map_err(|e| Error::MetricsFormat(e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
            }
        }
        MetricsFormat::CsvSummary => {
            writeln!(out, "step,mean_w2sq,std_w2sq").map_err(|e| Error::io(path, e))?;
            for band in &log.bands {
                writeln!(out, "{},{},{}", band.step, band.mean_w2sq, band.std_w2sq)
                    .map_err(|e| Error::io(path, e))?;
            }
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a metrics file back; the CSV format recovers only the bands.
pub fn load_metrics(path: &str, format: MetricsFormat) -> Result<MetricsLog> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut log = MetricsLog::default();
    match format {
        MetricsFormat::JsonLines => {
            for (lineno, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                if line.contains("\"run_summary\"") {
                    let tagged: TaggedSummary = serde_json::from_str(&line).map_err(|e| {
                        Error::MetricsFormat(format!("{path}:{}: {e}", lineno + 1))
                    })?;
                    log.run_summaries.push(tagged.run_summary);
                } else if line.contains("\"band\"") {
                    let tagged: TaggedBand = serde_json::from_str(&line).map_err(|e| {
                        Error::MetricsFormat(format!("{path}:{}: {e}", lineno + 1))
                    })?;
                    log.bands.push(tagged.band);
                } else {
                    let record: StepRecord = serde_json::from_str(&line).map_err(|e| {
                        Error::MetricsFormat(format!("{path}:{}: {e}", lineno + 1))
                    })?;
                    log.records.push(record);
                }
            }
        }
        MetricsFormat::CsvSummary => {
            for (lineno, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if lineno == 0 {
                    if line.trim() != "step,mean_w2sq,std_w2sq" {
                        return Err(Error::MetricsFormat(format!(
                            "{path}: unexpected CSV header '{line}'"
                        )));
                    }
                    continue;
                }
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 3 {
                    return Err(Error::MetricsFormat(format!(
                        "{path}:{}: expected 3 fields",
                        lineno + 1
                    )));
                }
                let parse = |s: &str| -> Result<f64> {
                    s.trim()
                        .parse()
                        .map_err(|e| Error::MetricsFormat(format!("{path}:{}: {e}", lineno + 1)))
                };
                log.bands.push(BatchBand {
                    step: fields[0].trim().parse().map_err(|e| {
                        Error::MetricsFormat(format!("{path}:{}: {e}", lineno + 1))
                    })?,
                    mean_w2sq: parse(fields[1])?,
                    std_w2sq: parse(fields[2])?,
                });
            }
        }
    }
    Ok(log)
}

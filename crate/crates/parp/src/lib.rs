//! Scenario files, trace files, metrics reports and the scenario suite for
//! the parp simulator. The `parp` binary is a thin shell over this crate.

pub mod report;
pub mod scenario;
pub mod suite;
pub mod trace;

pub use parp_core as core;

use std::fs;
use std::io;
use std::path::Path;

use parp_core::simnet::{ExpectationResult, RunOutput};

use crate::report::MetricsReport;

pub const TRACE_FILE: &str = "trace.jsonl";
pub const REPORT_FILE: &str = "report.txt";
pub const METRICS_FILE: &str = "metrics.json";
pub const ASSERTIONS_FILE: &str = "assertions.json";

/// Writes the trace, rendered report, metrics and assertion results of a run
/// into `dir`, creating it if needed.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> io::Result<MetricsReport> {
    let report = MetricsReport::from_trace(&out.trace).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(TRACE_FILE), trace::to_jsonl(&out.trace))?;
    fs::write(dir.join(REPORT_FILE), report.render())?;
    fs::write(dir.join(METRICS_FILE), report.to_json())?;
    fs::write(dir.join(ASSERTIONS_FILE), assertions_json(&out.expectations))?;
    Ok(report)
}

pub fn assertions_json(results: &[ExpectationResult]) -> String {
    let mut s = serde_json::to_string_pretty(results).expect("results serialize");
    s.push('\n');
    s
}

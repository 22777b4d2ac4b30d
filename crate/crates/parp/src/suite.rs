//! Runs a set of scenarios, one worker thread each, and tabulates outcomes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;

use parp_core::simnet::{run, Scenario};

use crate::scenario::{self, LoadError, BUNDLED};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteRow {
    pub name: String,
    pub passed: bool,
    pub expectations: usize,
    /// Failed expectations or the run error, one line each.
    pub failures: Vec<String>,
}

pub fn bundled() -> Vec<(String, Scenario)> {
    BUNDLED
        .iter()
        .map(|(name, text)| ((*name).to_owned(), scenario::parse(text).expect("bundled scenarios are valid")))
        .collect()
}

/// Loads every `*.scenario` file of `dir`, sorted by file name.
pub fn from_dir(dir: &Path) -> Result<Vec<(String, Scenario)>, LoadError> {
    let io = |source| LoadError::Io { path: dir.display().to_string(), source };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "scenario"));
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            scenario::load(&p).map(|s| (stem, s))
        })
        .collect()
}

pub fn run_all(scenarios: Vec<(String, Scenario)>) -> Vec<SuiteRow> {
    thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .into_iter()
            .map(|(name, s)| scope.spawn(move || run_one(name, s)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("scenario worker panicked")).collect()
    })
}

fn run_one(name: String, s: Scenario) -> SuiteRow {
    match run(s) {
        Ok(out) => {
            let mut failures: Vec<String> = out
                .expectations
                .iter()
                .filter(|e| !e.passed)
                .map(|e| format!("{:?}: {}", e.expectation, e.detail))
                .collect();
            if !parp_core::simnet::conserved(&out.trace) {
                failures.push("token conservation violated".into());
            }
            SuiteRow { name, passed: failures.is_empty(), expectations: out.expectations.len(), failures }
        }
        Err(e) => SuiteRow { name, passed: false, expectations: 0, failures: vec![e.to_string()] },
    }
}

pub fn summary(rows: &[SuiteRow]) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "{:<22} {:>6} {:>7}", "scenario", "result", "checks");
    for r in rows {
        let _ = writeln!(o, "{:<22} {:>6} {:>7}", r.name, if r.passed { "pass" } else { "FAIL" }, r.expectations);
        for f in &r.failures {
            let _ = writeln!(o, "    {f}");
        }
    }
    let passed = rows.iter().filter(|r| r.passed).count();
    let _ = writeln!(o, "{passed}/{} scenarios passed", rows.len());
    o
}

use std::fs;
use std::process::{Command, Output};

use parp::scenario::BUNDLED;

fn parp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parp")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn bundled(name: &str) -> &'static str {
    BUNDLED.iter().find(|(n, _)| *n == name).unwrap().1
}

#[test]
fn run_writes_artifacts_and_report_regenerates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("honest");
    let o = parp(&["run", "honest", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    for f in [parp::TRACE_FILE, parp::REPORT_FILE, parp::METRICS_FILE, parp::ASSERTIONS_FILE] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let r = parp(&["report", out.join(parp::TRACE_FILE).to_str().unwrap()]);
    assert_eq!(code(&r), 0);
    assert_eq!(r.stdout, fs::read(out.join(parp::REPORT_FILE)).unwrap());
    let j = parp(&["report", "--json", out.join(parp::TRACE_FILE).to_str().unwrap()]);
    assert_eq!(j.stdout, fs::read(out.join(parp::METRICS_FILE)).unwrap());
}

#[test]
fn fraud_run_reports_one_accepted_proof() {
    let dir = tempfile::tempdir().unwrap();
    let o = parp(&["run", "fraud_payment", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(parp::METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(metrics["fraud"]["accepted"]["payment_mismatch"], 1);
    assert_eq!(metrics["lifecycle"]["fraud_proofs"], 1);
}

#[test]
fn scenario_files_run_from_disk_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.scenario");
    fs::write(&path, bundled("honest_zero_calls")).unwrap();
    let out = dir.path().join("out");
    let o = parp(&[
        "run",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "77",
        "--blocks-per-tick",
        "5",
        "--dispute-window",
        "4",
        "--horizon",
        "900",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let trace = parp::trace::read(&out.join(parp::TRACE_FILE)).unwrap();
    assert!(matches!(trace[0], parp_core::simnet::TraceEvent::Start { seed: 77, .. }));
    let blocks: Vec<u64> = trace
        .iter()
        .filter_map(|e| match e {
            parp_core::simnet::TraceEvent::Block { t, .. } => Some(*t),
            _ => None,
        })
        .collect();
    assert!(blocks.iter().all(|t| t % 5 == 0) && blocks.len() > 2);
}

#[test]
fn failed_assertion_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wrong.scenario");
    fs::write(&path, bundled("honest").replace("to_node = 4", "to_node = 5")).unwrap();
    let o = parp(&["run", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn usage_and_io_errors_exit_two() {
    assert_eq!(code(&parp(&["run", "/nonexistent/none.scenario"])), 2);
    assert_eq!(code(&parp(&["run"])), 2);
    assert_eq!(code(&parp(&["frobnicate"])), 2);
    assert_eq!(code(&parp(&["report", "/nonexistent/trace.jsonl"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad_trace = dir.path().join("t.jsonl");
    fs::write(&bad_trace, "{\"event\":\"block\"}\n").unwrap();
    let o = parp(&["report", bad_trace.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("malformed trace"));

    let bad_scenario = dir.path().join("s.scenario");
    fs::write(&bad_scenario, "[network]\nd_min = 5\nd_max = 2\n").unwrap();
    assert_eq!(code(&parp(&["run", bad_scenario.to_str().unwrap()])), 2);
}

#[test]
fn suite_passes_and_negative_control_fails() {
    let o = parp(&["suite"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let summary = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(summary.contains(&format!("{n}/{n} scenarios passed", n = BUNDLED.len())));
    assert_eq!(parp(&["suite"]).stdout, o.stdout, "suite output differs across runs");

    let dir = tempfile::tempdir().unwrap();
    for (name, text) in BUNDLED {
        fs::write(dir.path().join(format!("{name}.scenario")), text).unwrap();
    }
    let honest = dir.path().join("honest.scenario");
    let flipped = bundled("honest").replacen("[[nodes]]\n", "[[nodes]]\nbehavior = { policy = \"wrong_amount\", delta = 1 }\n", 1);
    fs::write(&honest, flipped).unwrap();
    let o = parp(&["suite", "--dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("honest ") && l.contains("FAIL")), "{text}");
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        assert_eq!(code(&parp(&["run", "silent_close", "--out", out.to_str().unwrap()])), 0);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in [parp::TRACE_FILE, parp::REPORT_FILE, parp::METRICS_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

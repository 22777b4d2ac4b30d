use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use parp::report::MetricsReport;
use parp::scenario::{self, LoadError, Overrides};
use parp::suite;

/// Exit codes: 0 all assertions hold, 1 an assertion failed, 2 usage or I/O error.
#[derive(Parser)]
#[command(name = "parp", version, about = "Deterministic simulator for paid, accountable light-client RPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file (or bundled scenario name) and write its artifacts.
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `out/<scenario name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ticks between consecutive blocks.
        #[arg(long)]
        blocks_per_tick: Option<u64>,
        /// Dispute window in blocks.
        #[arg(long)]
        dispute_window: Option<u64>,
        /// Last simulated tick.
        #[arg(long)]
        horizon: Option<u64>,
    },
    /// Print the metrics report of a trace file.
    Report {
        trace: PathBuf,
        /// Emit JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Run every bundled scenario, or every `*.scenario` file of `--dir`.
    Suite {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

const FAILED: u8 = 1;
const USAGE: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(USAGE)
        }
    }
}

fn execute(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Run { scenario: arg, seed, out, blocks_per_tick, dispute_window, horizon } => {
            let mut s = scenario::resolve(&arg)?;
            Overrides { seed, block_interval: blocks_per_tick, dispute_window, horizon }.apply(&mut s);
            s.validate().map_err(LoadError::from)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("out").join(&s.name));
            let output = parp_core::simnet::run(s)?;
            parp::write_artifacts(&output, &dir).with_context(|| format!("writing artifacts to {}", dir.display()))?;
            for r in &output.expectations {
                let mark = if r.passed { "ok  " } else { "FAIL" };
                println!("{mark} {:?}: {}", r.expectation, r.detail);
            }
            if !parp_core::simnet::conserved(&output.trace) {
                println!("FAIL token conservation violated");
            }
            println!("artifacts in {}", dir.display());
            Ok(if output.passed() { 0 } else { FAILED })
        }
        Command::Report { trace, json } => {
            let events = parp::trace::read(&trace)?;
            let report = MetricsReport::from_trace(&events)?;
            print!("{}", if json { report.to_json() } else { report.render() });
            Ok(0)
        }
        Command::Suite { dir } => {
            let scenarios = match dir {
                Some(d) => suite::from_dir(&d)?,
                None => suite::bundled(),
            };
            if scenarios.is_empty() {
                anyhow::bail!("no scenarios to run");
            }
            let rows = suite::run_all(scenarios);
            print!("{}", suite::summary(&rows));
            Ok(if rows.iter().all(|r| r.passed) { 0 } else { FAILED })
        }
    }
}

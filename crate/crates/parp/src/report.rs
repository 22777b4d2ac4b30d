//! Metrics derived from a trace. A report is a pure function of the trace it
//! was built from and carries no wall-clock data.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use parp_core::simnet::{tx_proof_sizes, TraceEvent};
use parp_core::lightclient::Verdict;
use serde::Serialize;

/// Request metadata size of the reference implementation, in bytes.
pub const REFERENCE_REQUEST_OVERHEAD: u64 = 226;
/// Response metadata size of the reference implementation, in bytes.
pub const REFERENCE_RESPONSE_OVERHEAD: u64 = 187;
/// Approximate inclusion-proof size in a 200-transaction block.
pub const REFERENCE_PROOF_SIZE: u64 = 1150;
/// Block sizes for which the proof-size-vs-index curve is tabulated.
pub const CURVE_BLOCK_SIZES: [usize; 3] = [16, 64, 200];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeStats {
    pub count: u64,
    pub min: u64,
    pub mean: f64,
    pub max: u64,
}

impl SizeStats {
    pub fn of(values: impl IntoIterator<Item = u64>) -> Option<Self> {
        let mut count = 0u64;
        let (mut min, mut max, mut sum) = (u64::MAX, 0u64, 0u128);
        for v in values {
            count += 1;
            min = min.min(v);
            max = max.max(v);
            sum += u128::from(v);
        }
        (count > 0).then(|| SizeStats { count, min, mean: sum as f64 / count as f64, max })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub metric: String,
    pub measured: Option<f64>,
    pub reference: u64,
    /// Percentage difference from the reference; `None` when unmeasured.
    pub delta_pct: Option<f64>,
}

impl Comparison {
    fn new(metric: &str, measured: Option<f64>, reference: u64) -> Self {
        let delta_pct = measured.map(|m| (m - reference as f64) / reference as f64 * 100.0);
        Self { metric: metric.into(), measured, reference, delta_pct }
    }
}

/// A maximal run of consecutive transaction indices with equal proof size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProofRun {
    pub first: usize,
    pub last: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProofCurve {
    pub block_size: usize,
    pub mean: f64,
    pub runs: Vec<ProofRun>,
}

impl ProofCurve {
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut runs: Vec<ProofRun> = Vec::new();
        for (i, &bytes) in sizes.iter().enumerate() {
            match runs.last_mut() {
                Some(r) if r.bytes == bytes => r.last = i,
                _ => runs.push(ProofRun { first: i, last: i, bytes }),
            }
        }
        let mean = sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64;
        Self { block_size: sizes.len(), mean, runs }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TxCounts {
    pub applied: u64,
    pub rejected: u64,
}

/// Operation counts for the four phases of a connection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Lifecycle {
    pub handshakes: u64,
    pub channel_opens: u64,
    pub requests: u64,
    pub responses: u64,
    pub closes: u64,
    pub state_submissions: u64,
    pub confirmations: u64,
    pub fraud_proofs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SettlementRow {
    pub alpha: u64,
    pub client: String,
    pub node: String,
    pub to_node: u64,
    pub to_client: u64,
    pub height: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerdictCounts {
    pub valid: u64,
    pub invalid: BTreeMap<String, u64>,
    pub fraudulent: BTreeMap<String, u64>,
    pub probes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FraudCounts {
    pub accepted: BTreeMap<String, u64>,
    pub rejected: BTreeMap<String, u64>,
    pub slashed_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub final_tick: u64,
    pub final_height: u64,
    pub conserved: bool,
    pub comparison: Vec<Comparison>,
    pub messages: BTreeMap<String, SizeStats>,
    pub request_overhead: Option<SizeStats>,
    pub response_overhead: Option<SizeStats>,
    pub response_proofs: Option<SizeStats>,
    pub proof_curves: Vec<ProofCurve>,
    pub transactions: BTreeMap<String, TxCounts>,
    pub lifecycle: Lifecycle,
    pub settlements: Vec<SettlementRow>,
    pub verdicts: VerdictCounts,
    pub fraud: FraudCounts,
}

fn name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v).expect("serializable") {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

impl MetricsReport {
    pub fn from_trace(trace: &[TraceEvent]) -> Result<Self, ReportError> {
        let Some(TraceEvent::Start { scenario, seed, .. }) = trace.first() else {
            return Err(ReportError::MalformedTrace("first event is not `start`".into()));
        };
        let Some(&TraceEvent::End { t, height, conserved, .. }) = trace.last() else {
            return Err(ReportError::MalformedTrace("last event is not `end`".into()));
        };

        let mut message_sizes: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        let (mut req_oh, mut res_oh, mut proofs) = (Vec::new(), Vec::new(), Vec::new());
        let mut transactions: BTreeMap<String, TxCounts> = BTreeMap::new();
        let mut lifecycle = Lifecycle::default();
        let mut settlements = Vec::new();
        let mut verdicts = VerdictCounts::default();
        let mut fraud = FraudCounts::default();
        let mut all_conserved = conserved;

        for e in trace {
            match e {
                TraceEvent::Message { kind, bytes, .. } => {
                    message_sizes.entry(name(kind)).or_default().push(*bytes as u64);
                    if name(kind) == "handshake" {
                        lifecycle.handshakes += 1;
                    }
                }
                TraceEvent::Request { overhead, .. } => {
                    req_oh.push(*overhead as u64);
                    lifecycle.requests += 1;
                }
                TraceEvent::Response { overhead, proof_bytes, .. } => {
                    res_oh.push(*overhead as u64);
                    if *proof_bytes > 0 {
                        proofs.push(*proof_bytes as u64);
                    }
                    lifecycle.responses += 1;
                }
                TraceEvent::Tx { kind, error, .. } => {
                    let c = transactions.entry(name(kind)).or_default();
                    if error.is_some() {
                        c.rejected += 1;
                        continue;
                    }
                    c.applied += 1;
                    match name(kind).as_str() {
                        "open_channel" => lifecycle.channel_opens += 1,
                        "close_channel" => lifecycle.closes += 1,
                        "submit_state" => lifecycle.state_submissions += 1,
                        "confirm_closure" => lifecycle.confirmations += 1,
                        _ => {}
                    }
                }
                TraceEvent::Block { conserved, .. } => all_conserved &= conserved,
                TraceEvent::Settlement { height, alpha, client, node, to_node, to_client, .. } => {
                    settlements.push(SettlementRow {
                        alpha: *alpha,
                        client: client.clone(),
                        node: node.clone(),
                        to_node: *to_node,
                        to_client: *to_client,
                        height: *height,
                    });
                }
                TraceEvent::Verdict { verdict, probe, .. } => {
                    verdicts.probes += u64::from(*probe);
                    match verdict {
                        Verdict::Valid => verdicts.valid += 1,
                        Verdict::Invalid { reason } => *verdicts.invalid.entry(name(reason)).or_default() += 1,
                        Verdict::Fraudulent { condition } => {
                            *verdicts.fraudulent.entry(name(condition)).or_default() += 1
                        }
                    }
                }
                TraceEvent::FraudProof { accepted, error, .. } => {
                    lifecycle.fraud_proofs += 1;
                    match (accepted, error) {
                        (Some(c), _) => *fraud.accepted.entry(name(c)).or_default() += 1,
                        (None, Some(err)) => *fraud.rejected.entry(name(err)).or_default() += 1,
                        (None, None) => {
                            return Err(ReportError::MalformedTrace("fraud proof with neither outcome".into()));
                        }
                    }
                }
                TraceEvent::Slash { total, .. } => fraud.slashed_total += total,
                _ => {}
            }
        }

        let request_overhead = SizeStats::of(req_oh);
        let response_overhead = SizeStats::of(res_oh);
        let proof_curves: Vec<ProofCurve> =
            CURVE_BLOCK_SIZES.iter().map(|&n| ProofCurve::from_sizes(&tx_proof_sizes(n, *seed))).collect();
        let proof_200 = proof_curves.iter().find(|c| c.block_size == 200).map(|c| c.mean);
        let comparison = vec![
            Comparison::new("request fixed overhead", request_overhead.map(|s| s.mean), REFERENCE_REQUEST_OVERHEAD),
            Comparison::new("response fixed overhead", response_overhead.map(|s| s.mean), REFERENCE_RESPONSE_OVERHEAD),
            Comparison::new("200-tx inclusion proof", proof_200, REFERENCE_PROOF_SIZE),
        ];

        Ok(Self {
            scenario: scenario.clone(),
            seed: *seed,
            final_tick: t,
            final_height: height,
            conserved: all_conserved,
            comparison,
            messages: message_sizes.into_iter().filter_map(|(k, v)| SizeStats::of(v).map(|s| (k, s))).collect(),
            request_overhead,
            response_overhead,
            response_proofs: SizeStats::of(proofs),
            proof_curves,
            transactions,
            lifecycle,
            settlements,
            verdicts,
            fraud,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text rendering, stable across runs.
    pub fn render(&self) -> String {
        let mut o = String::new();
        let w = &mut o;
        let _ = writeln!(w, "scenario {} (seed {})", self.scenario, self.seed);
        let _ = writeln!(
            w,
            "ended at tick {}, height {}, conservation {}",
            self.final_tick,
            self.final_height,
            if self.conserved { "held" } else { "VIOLATED" }
        );

        section(w, "comparison with reference sizes");
        let _ = writeln!(w, "{:<26} {:>10} {:>10} {:>8}", "metric", "measured", "reference", "delta");
        for c in &self.comparison {
            let measured = c.measured.map_or_else(|| "n/a".into(), |m| format!("{m:.1}"));
            let delta = c.delta_pct.map_or_else(|| "n/a".into(), |d| format!("{d:+.1}%"));
            let _ = writeln!(w, "{:<26} {:>10} {:>10} {:>8}", c.metric, measured, c.reference, delta);
        }

        section(w, "message sizes (bytes)");
        stats_header(w, "kind");
        for (k, s) in &self.messages {
            stats_row(w, k, s);
        }
        for (label, s) in [
            ("request overhead", &self.request_overhead),
            ("response overhead", &self.response_overhead),
            ("response proofs", &self.response_proofs),
        ] {
            if let Some(s) = s {
                stats_row(w, label, s);
            }
        }

        section(w, "inclusion proof size by transaction index");
        for c in &self.proof_curves {
            let _ = writeln!(w, "block of {} txs, mean {:.1} B", c.block_size, c.mean);
            for r in &c.runs {
                let _ = writeln!(w, "  {:>4}..={:<4} {:>5} B", r.first, r.last, r.bytes);
            }
        }

        section(w, "on-chain transactions");
        let _ = writeln!(w, "{:<18} {:>8} {:>8}", "kind", "applied", "rejected");
        for (k, c) in &self.transactions {
            let _ = writeln!(w, "{:<18} {:>8} {:>8}", k, c.applied, c.rejected);
        }

        section(w, "lifecycle operations");
        let l = &self.lifecycle;
        for (label, n) in [
            ("handshakes", l.handshakes),
            ("channel opens", l.channel_opens),
            ("requests", l.requests),
            ("responses", l.responses),
            ("closes", l.closes),
            ("state submissions", l.state_submissions),
            ("confirmations", l.confirmations),
            ("fraud proofs", l.fraud_proofs),
        ] {
            let _ = writeln!(w, "{label:<18} {n:>8}");
        }

        section(w, "settlements");
        let _ = writeln!(w, "{:>5} {:<10} {:<10} {:>8} {:>9} {:>7}", "alpha", "client", "node", "to_node", "to_client", "height");
        for s in &self.settlements {
            let _ = writeln!(
                w,
                "{:>5} {:<10} {:<10} {:>8} {:>9} {:>7}",
                s.alpha, s.client, s.node, s.to_node, s.to_client, s.height
            );
        }

        section(w, "verdicts");
        let v = &self.verdicts;
        let _ = writeln!(w, "valid {} (of which probes {})", v.valid, v.probes);
        let _ = writeln!(w, "invalid {}", v.invalid.values().sum::<u64>());
        for (k, n) in &v.invalid {
            let _ = writeln!(w, "  {k} {n}");
        }
        let _ = writeln!(w, "fraudulent {}", v.fraudulent.values().sum::<u64>());
        for (k, n) in &v.fraudulent {
            let _ = writeln!(w, "  {k} {n}");
        }

        section(w, "fraud proofs");
        let f = &self.fraud;
        let _ = writeln!(w, "accepted {}", f.accepted.values().sum::<u64>());
        for (k, n) in &f.accepted {
            let _ = writeln!(w, "  {k} {n}");
        }
        let _ = writeln!(w, "rejected {}", f.rejected.values().sum::<u64>());
        for (k, n) in &f.rejected {
            let _ = writeln!(w, "  {k} {n}");
        }
        let _ = writeln!(w, "slashed total {}", f.slashed_total);
        o
    }
}

fn section(w: &mut String, title: &str) {
    let _ = writeln!(w, "\n== {title} ==");
}

fn stats_header(w: &mut String, label: &str) {
    let _ = writeln!(w, "{:<18} {:>6} {:>6} {:>8} {:>6}", label, "count", "min", "mean", "max");
}

fn stats_row(w: &mut String, label: &str, s: &SizeStats) {
    let _ = writeln!(w, "{:<18} {:>6} {:>6} {:>8.1} {:>6}", label, s.count, s.min, s.mean, s.max);
}

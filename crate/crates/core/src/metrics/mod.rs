//! Latency, throughput and message-complexity measurements over simulation
//! traces, plus the packaged experiments in [`scenarios`].

mod complexity;
pub mod scenarios;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{Trace, TraceRecord};

pub use complexity::{
    complexity_sweep, loglog_slope, message_complexity, ComplexityPoint, ComplexityReport,
    SweepProtocol,
};
pub use scenarios::{list_scenarios, run_scenario, ScenarioOutcome, ScenarioSettings, SCENARIOS};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trace has no complete {0} phase")]
    MissingPhase(&'static str),
    #[error("block confirmation time must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("transaction size must be positive")]
    ZeroTxSize,
    #[error("unknown scenario `{name}`; available: {}", available.join(", "))]
    UnknownScenario {
        name: String,
        available: Vec<&'static str>,
    },
    #[error("simulation failed: {0}")]
    Sim(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Transaction broadcast until every node holds it.
    Ct,
    /// Block proposal until every node has verified it.
    Bp,
    /// First vote of an epoch until every node finalized it.
    Cf,
}

impl Phase {
    fn describe(self) -> &'static str {
        match self {
            Phase::Ct => "transaction propagation (tx_submit -> tx_recv)",
            Phase::Bp => "block propagation (propose -> verified)",
            Phase::Cf => "finality (vote_cast -> finalize)",
        }
    }
}

/// One measured interval with the trace records that define it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSample {
    pub phase: Phase,
    /// Transaction id, block hash or epoch number the interval belongs to.
    pub key: String,
    pub start_seq: u64,
    pub end_seq: u64,
    pub start_ms: u64,
    pub end_ms: u64,
    pub observers: usize,
}

impl PhaseSample {
    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }
}

/// Mean phase latencies in simulated milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub k: usize,
    pub block_size: u64,
    pub t_ct: f64,
    pub t_bp: f64,
    pub t_cf: f64,
    pub t_bc: f64,
    pub samples: Vec<PhaseSample>,
}

impl LatencyReport {
    pub fn samples_of(&self, phase: Phase) -> impl Iterator<Item = &PhaseSample> {
        self.samples.iter().filter(move |s| s.phase == phase)
    }
}

fn detail_field<'a>(r: &'a TraceRecord, key: &str) -> Option<&'a str> {
    r.detail
        .as_deref()?
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

/// Pairs each `start` mark with every `end` mark carrying the same key; an
/// instance counts once at least `observers` ends were seen.
fn collect_phase(
    trace: &Trace,
    phase: Phase,
    (start_label, start_key): (&str, &str),
    (end_label, end_key): (&str, &str),
    observers: usize,
) -> Vec<PhaseSample> {
    let mut starts: BTreeMap<&str, &TraceRecord> = BTreeMap::new();
    for r in trace.marks(start_label) {
        if let Some(k) = detail_field(r, start_key) {
            starts.entry(k).or_insert(r);
        }
    }
    let mut ends: BTreeMap<&str, (usize, &TraceRecord)> = BTreeMap::new();
    for r in trace.marks(end_label) {
        let Some(k) = detail_field(r, end_key) else {
            continue;
        };
        if !starts.contains_key(k) {
            continue;
        }
        let e = ends.entry(k).or_insert((0, r));
        e.0 += 1;
        if (r.time, r.seq) > (e.1.time, e.1.seq) {
            e.1 = r;
        }
    }
    starts
        .iter()
        .filter_map(|(k, s)| {
            let (count, e) = ends.get(k)?;
            (*count >= observers.max(1)).then(|| PhaseSample {
                phase,
                key: k.to_string(),
                start_seq: s.seq,
                end_seq: e.seq,
                start_ms: s.time,
                end_ms: e.time,
                observers: *count,
            })
        })
        .collect()
}

/// Epochs start at their earliest vote, so starts are gathered by minimum.
fn collect_finality(trace: &Trace, k: usize) -> Vec<PhaseSample> {
    let mut starts: BTreeMap<u64, &TraceRecord> = BTreeMap::new();
    for r in trace.marks("vote_cast") {
        let Some(e) = detail_field(r, "epoch").and_then(|v| v.parse().ok()) else {
            continue;
        };
        let s = starts.entry(e).or_insert(r);
        if (r.time, r.seq) < (s.time, s.seq) {
            *s = r;
        }
    }
    let mut ends: BTreeMap<u64, (usize, &TraceRecord)> = BTreeMap::new();
    for r in trace.marks("finalize") {
        let Some(e) = detail_field(r, "epoch").and_then(|v| v.parse().ok()) else {
            continue;
        };
        let slot = ends.entry(e).or_insert((0, r));
        slot.0 += 1;
        if (r.time, r.seq) > (slot.1.time, slot.1.seq) {
            slot.1 = r;
        }
    }
    starts
        .iter()
        .filter_map(|(epoch, s)| {
            let (count, e) = ends.get(epoch)?;
            (*count >= k.max(1)).then(|| PhaseSample {
                phase: Phase::Cf,
                key: epoch.to_string(),
                start_seq: s.seq,
                end_seq: e.seq,
                start_ms: s.time,
                end_ms: e.time,
                observers: *count,
            })
        })
        .collect()
}

fn mean_ms(samples: &[PhaseSample]) -> f64 {
    samples.iter().map(|s| s.duration_ms() as f64).sum::<f64>() / samples.len() as f64
}

/// Mean per-instance latencies of a microchain run with `k` committee
/// members. Only instances that reached every member count.
pub fn measure_latencies(
    trace: &Trace,
    k: usize,
    block_size: u64,
) -> Result<LatencyReport, MetricsError> {
    let others = k.saturating_sub(1);
    let ct = collect_phase(
        trace,
        Phase::Ct,
        ("tx_submit", "tx"),
        ("tx_recv", "tx"),
        others,
    );
    let bp = collect_phase(
        trace,
        Phase::Bp,
        ("propose", "block"),
        ("verified", "block"),
        others,
    );
    let cf = collect_finality(trace, k);
    for (samples, phase) in [(&ct, Phase::Ct), (&bp, Phase::Bp), (&cf, Phase::Cf)] {
        if samples.is_empty() {
            return Err(MetricsError::MissingPhase(phase.describe()));
        }
    }
    let (t_ct, t_bp, t_cf) = (mean_ms(&ct), mean_ms(&bp), mean_ms(&cf));
    let mut samples = ct;
    samples.extend(bp);
    samples.extend(cf);
    Ok(LatencyReport {
        k,
        block_size,
        t_ct,
        t_bp,
        t_cf,
        t_bc: t_ct + t_bp + t_cf,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub mb_per_hour: f64,
    pub tx_per_s: f64,
}

/// Megabytes (10^6 bytes) confirmed per hour and the implied transaction
/// rate: `Th = block_MB / t_bc * 3600`, `tx/s = Th * 1000 / (3600 * tx_KB)`.
pub fn throughput(
    block_bytes: u64,
    t_bc_s: f64,
    tx_bytes: u64,
) -> Result<Throughput, MetricsError> {
    if !(t_bc_s.is_finite() && t_bc_s > 0.0) {
        return Err(MetricsError::NonPositiveDuration(t_bc_s));
    }
    if tx_bytes == 0 {
        return Err(MetricsError::ZeroTxSize);
    }
    let mb_per_hour = block_bytes as f64 / 1e6 / t_bc_s * 3600.0;
    let tx_per_s = mb_per_hour * 1e3 / (3600.0 * tx_bytes as f64 / 1e3);
    Ok(Throughput {
        mb_per_hour,
        tx_per_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microchain::{microchain_run, MicrochainParams, MicrochainScenario};
    use crate::netsim::{NetworkModel, SynchronyModel, TraceKind};

    fn mark(seq: u64, time: u64, node: usize, label: &str, detail: &str) -> TraceRecord {
        let mut r = TraceRecord::new(seq, time, TraceKind::Mark);
        r.node = Some(node);
        r.label = Some(label.into());
        r.detail = Some(detail.into());
        r
    }

    fn synthetic() -> Trace {
        let recs = vec![
            mark(0, 100, 0, "tx_submit", "tx=aa slot=1"),
            mark(1, 130, 1, "tx_recv", "tx=aa"),
            mark(2, 150, 2, "tx_recv", "tx=aa"),
            mark(3, 1000, 1, "propose", "block=bb height=1 slot=1 bytes=0"),
            mark(4, 1040, 0, "verified", "block=bb height=1"),
            mark(5, 1070, 2, "verified", "block=bb height=1"),
            mark(6, 2000, 0, "vote_cast", "epoch=1 block=bb"),
            mark(7, 2000, 1, "vote_cast", "epoch=1 block=bb"),
            mark(8, 2030, 0, "finalize", "epoch=1 height=10 block=bb"),
            mark(9, 2060, 1, "finalize", "epoch=1 height=10 block=bb"),
            mark(10, 2090, 2, "finalize", "epoch=1 height=10 block=bb"),
        ];
        Trace { records: recs }
    }

    #[test]
    fn synthetic_trace_latencies() {
        let r = measure_latencies(&synthetic(), 3, 0).unwrap();
        assert_eq!((r.t_ct, r.t_bp, r.t_cf), (50.0, 70.0, 90.0));
        assert_eq!(r.t_bc, r.t_ct + r.t_bp + r.t_cf);
        let cf: Vec<_> = r.samples_of(Phase::Cf).collect();
        assert_eq!((cf[0].start_seq, cf[0].end_seq), (6, 10));
    }

    #[test]
    fn incomplete_phase_is_named() {
        let mut t = synthetic();
        t.records.retain(|r| r.label.as_deref() != Some("finalize"));
        let err = measure_latencies(&t, 3, 0).unwrap_err();
        assert!(err.to_string().contains("finality"), "{err}");
        // a transaction seen by one of two peers is not complete
        let mut t = synthetic();
        t.records.remove(2);
        assert!(measure_latencies(&t, 3, 0)
            .unwrap_err()
            .to_string()
            .contains("transaction"));
    }

    #[test]
    fn single_member_sees_one_hop() {
        let params = MicrochainParams {
            epoch_length: 2,
            ..Default::default()
        };
        let model = NetworkModel::new(SynchronyModel::fixed(37));
        let s = MicrochainScenario::honest(&[1, 1], params, model, 20);
        let r = microchain_run(&s, 2).unwrap();
        let lat = measure_latencies(&r.trace, 1, 0).unwrap();
        assert_eq!(lat.t_ct, 37.0);
        assert_eq!(lat.t_bp, 37.0);
    }

    #[test]
    fn throughput_formula() {
        let t = throughput(2_000_000, 17.78, 1000).unwrap();
        assert!((t.mb_per_hour - 404.95).abs() < 0.01, "{t:?}");
        assert!((t.tx_per_s - 112.49).abs() < 0.01, "{t:?}");
        let unit = throughput(1_000_000, 3600.0, 1000).unwrap();
        assert!((unit.mb_per_hour - 1.0).abs() < 1e-12);
        assert!(matches!(
            throughput(1, 0.0, 1000),
            Err(MetricsError::NonPositiveDuration(_))
        ));
        assert!(matches!(
            throughput(1, 1.0, 0),
            Err(MetricsError::ZeroTxSize)
        ));
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    complexity_sweep, loglog_slope, measure_latencies, throughput, ComplexityReport, LatencyReport,
    MetricsError, SweepProtocol,
};
use crate::microchain::{
    microchain_run, ConflictRecord, MicrochainParams, MicrochainReport, MicrochainScenario,
    ValidatorFault,
};
use crate::nakamoto::{mining_run, overtake_monte_carlo, MiningScenario, OvertakeEstimate};
use crate::netsim::{NetworkModel, SharedMedium, SynchronyModel, Trace, TraceLevel};
use crate::rng::indexed_substream;

pub const SCENARIOS: [(&str, &str); 6] = [
    (
        "committee-size",
        "microchain latencies for K in 4..16 over a shared medium",
    ),
    (
        "block-size",
        "microchain throughput for growing blocks under a bandwidth cap",
    ),
    (
        "attacker-overtake",
        "Monte Carlo attacker catch-up against the closed form",
    ),
    (
        "selfish-mining",
        "revenue share of a selfish miner by hash power",
    ),
    (
        "byzantine-safety",
        "seeded runs with double-voting credit below and above one third",
    ),
    (
        "message-complexity",
        "message counts and log-log growth for OM, PBFT, VR and Nakamoto",
    ),
];

pub fn list_scenarios() -> Vec<(&'static str, &'static str)> {
    SCENARIOS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSettings {
    pub seed: u64,
    pub workers: usize,
    pub committee_sizes: Vec<usize>,
    /// Seeded runs averaged per committee size or block size.
    pub runs_per_point: u64,
    pub block_sizes: Vec<u64>,
    pub overtake_shares: Vec<f64>,
    pub overtake_depths: Vec<u32>,
    pub overtake_trials: u64,
    pub selfish_shares: Vec<f64>,
    pub selfish_blocks: u64,
    pub safety_runs: u64,
    pub write_traces: bool,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            committee_sizes: vec![4, 8, 12, 16],
            runs_per_point: 3,
            block_sizes: vec![512_000, 1_000_000, 2_000_000, 4_000_000],
            overtake_shares: vec![0.1, 0.2, 0.3, 0.5],
            overtake_depths: vec![1, 2, 3],
            overtake_trials: 100_000,
            selfish_shares: vec![0.1, 0.2, 0.3, 0.4],
            selfish_blocks: 20_000,
            safety_runs: 1000,
            write_traces: true,
        }
    }
}

/// Result of one named scenario; `summary` is also written as JSON.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub name: String,
    pub summary: Value,
    /// Pass/fail of the shape checks the scenario makes about its own data.
    pub checks: BTreeMap<String, bool>,
    pub files: Vec<PathBuf>,
    /// Set when a run produced conflicting finalizations it was not built to.
    pub unexpected_conflict: Option<PathBuf>,
}

impl ScenarioOutcome {
    pub fn all_checks_pass(&self) -> bool {
        self.checks.values().all(|ok| *ok)
    }
}

/// Maps `f` over `items` on up to `workers` threads; output order matches input.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item mapped"))
        .collect()
}

fn sim_err(e: impl ToString) -> MetricsError {
    MetricsError::Sim(e.to_string())
}

// ---- microchain sweeps ----

/// Fixed short link delay with one shared channel, so that per-message cost
/// dominates and traffic volume shows up in latency.
pub fn committee_scenario(k: usize) -> MicrochainScenario {
    let params = MicrochainParams {
        epoch_length: 5,
        slot_ms: 4000,
        tx_bytes: 1000,
        ..Default::default()
    };
    let model = NetworkModel::new(SynchronyModel::fixed(2)).with_medium(SharedMedium {
        per_message_ms: 5.0,
        bytes_per_ms: None,
    });
    MicrochainScenario::honest(&vec![1; k], params, model, 40)
}

/// Four validators behind a link with long delay and a bandwidth cap.
pub fn block_size_scenario(block_bytes: u64) -> MicrochainScenario {
    let params = MicrochainParams {
        epoch_length: 5,
        slot_ms: 1000,
        block_bytes: block_bytes as usize,
        tx_bytes: 1000,
        ..Default::default()
    };
    let model = NetworkModel::new(SynchronyModel::fixed(200)).with_medium(SharedMedium {
        per_message_ms: 1.0,
        bytes_per_ms: Some(13_000.0),
    });
    MicrochainScenario::honest(&[1; 4], params, model, 60)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x: u64,
    pub runs: u64,
    pub t_ct: f64,
    pub t_bp: f64,
    pub t_cf: f64,
    pub t_bc: f64,
    pub messages: f64,
}

struct PointRun {
    latency: LatencyReport,
    messages: u64,
    trace: Trace,
}

fn latency_point(
    scenario: &MicrochainScenario,
    k: usize,
    block_bytes: u64,
    seed: u64,
) -> Result<PointRun, MetricsError> {
    let r = microchain_run(scenario, seed).map_err(sim_err)?;
    let latency = measure_latencies(&r.trace, k, block_bytes)?;
    Ok(PointRun {
        latency,
        messages: r.messages,
        trace: r.trace,
    })
}

fn average(x: u64, runs: &[PointRun]) -> SweepRow {
    let n = runs.len() as f64;
    let mean =
        |f: &dyn Fn(&LatencyReport) -> f64| runs.iter().map(|r| f(&r.latency)).sum::<f64>() / n;
    SweepRow {
        x,
        runs: runs.len() as u64,
        t_ct: mean(&|l| l.t_ct),
        t_bp: mean(&|l| l.t_bp),
        t_cf: mean(&|l| l.t_cf),
        t_bc: mean(&|l| l.t_bc),
        messages: runs.iter().map(|r| r.messages as f64).sum::<f64>() / n,
    }
}

type SweepResult = (Vec<SweepRow>, Vec<(String, Trace)>);

fn sweep(
    settings: &ScenarioSettings,
    xs: &[u64],
    build: impl Fn(u64) -> (MicrochainScenario, usize, u64) + Sync,
    tag: &str,
) -> Result<SweepResult, MetricsError> {
    let jobs: Vec<(u64, u64)> = xs
        .iter()
        .flat_map(|&x| (0..settings.runs_per_point.max(1)).map(move |i| (x, i)))
        .collect();
    let results = par_map(&jobs, settings.workers, |&(x, i)| {
        let (scenario, k, bytes) = build(x);
        latency_point(&scenario, k, bytes, settings.seed.wrapping_add(i))
    });
    let mut by_x: BTreeMap<u64, Vec<PointRun>> = BTreeMap::new();
    let mut traces = Vec::new();
    for ((x, i), r) in jobs.into_iter().zip(results) {
        let mut run = r?;
        if i == 0 {
            traces.push((format!("{tag}-{x}"), std::mem::take(&mut run.trace)));
        }
        by_x.entry(x).or_default().push(run);
    }
    let rows = xs.iter().map(|x| average(*x, &by_x[x])).collect();
    Ok((rows, traces))
}

pub fn committee_size_sweep(settings: &ScenarioSettings) -> Result<SweepResult, MetricsError> {
    let xs: Vec<u64> = settings.committee_sizes.iter().map(|&k| k as u64).collect();
    sweep(
        settings,
        &xs,
        |k| (committee_scenario(k as usize), k as usize, 0),
        "committee",
    )
}

pub fn block_size_sweep(settings: &ScenarioSettings) -> Result<SweepResult, MetricsError> {
    sweep(
        settings,
        &settings.block_sizes,
        |b| (block_size_scenario(b), 4, b),
        "block",
    )
}

pub fn slope_of(rows: &[SweepRow], f: impl Fn(&SweepRow) -> f64) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.x as f64, f(r))).collect();
    loglog_slope(&pts).unwrap_or(f64::NAN)
}

// ---- safety ----

/// Validators with random credits; double voters are added in random order
/// while their credit stays strictly below a third of the total.
pub fn minority_byzantine_scenario(seed: u64, index: u64) -> MicrochainScenario {
    let mut rng = indexed_substream(seed, "byzantine-roster", index);
    let n = 4 + (index % 4) as usize;
    let credits: Vec<u64> = (0..n).map(|_| rng.random_range(1..=5)).collect();
    let total: u64 = credits.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut byz = 0;
    let params = MicrochainParams {
        epoch_length: 5,
        probe_txs: false,
        ..Default::default()
    };
    let mut s = MicrochainScenario::honest(
        &credits,
        params,
        NetworkModel::new(SynchronyModel::fixed(20)),
        30,
    );
    for i in order {
        if 3 * (byz + credits[i]) < total {
            byz += credits[i];
            s.validators[i].fault = ValidatorFault::DoubleVote;
        }
    }
    s
}

/// Two double voters holding three quarters of the credit.
pub fn majority_byzantine_scenario() -> MicrochainScenario {
    let mut s = MicrochainScenario::honest(
        &[1, 1, 3, 3],
        MicrochainParams {
            epoch_length: 5,
            ..Default::default()
        },
        NetworkModel::new(SynchronyModel::fixed(20)),
        200,
    );
    s.trace_level = TraceLevel::Full;
    s.with_fault(2, ValidatorFault::DoubleVote)
        .with_fault(3, ValidatorFault::DoubleVote)
}

fn byzantine_share(s: &MicrochainScenario) -> f64 {
    let total: u64 = s.validators.iter().map(|v| v.credit).sum();
    let byz: u64 = s
        .validators
        .iter()
        .filter(|v| v.fault.is_byzantine())
        .map(|v| v.credit)
        .sum();
    byz as f64 / total as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafetyRow {
    pub run: u64,
    pub validators: usize,
    pub byzantine_share: f64,
    pub conflicts: usize,
    pub min_finalized_height: u64,
}

pub fn write_evidence(path: &Path, c: &ConflictRecord) -> Result<(), MetricsError> {
    fs::write(
        path,
        serde_json::to_vec_pretty(c).expect("evidence serializes"),
    )?;
    Ok(())
}

pub fn safety_runs(
    settings: &ScenarioSettings,
) -> Result<Vec<(SafetyRow, Option<MicrochainReport>)>, MetricsError> {
    let idx: Vec<u64> = (0..settings.safety_runs).collect();
    let out = par_map(&idx, settings.workers, |&i| {
        let s = minority_byzantine_scenario(settings.seed, i);
        let r = microchain_run(&s, settings.seed.wrapping_add(i)).map_err(sim_err)?;
        let row = SafetyRow {
            run: i,
            validators: s.validators.len(),
            byzantine_share: byzantine_share(&s),
            conflicts: r.conflicting_epochs().len(),
            min_finalized_height: r.min_honest_finalized_height(),
        };
        let keep = row.conflicts > 0;
        Ok((row, keep.then_some(r)))
    });
    out.into_iter().collect()
}

// ---- entry point ----

fn write_csv(
    path: &Path,
    header: &str,
    rows: impl IntoIterator<Item = String>,
) -> Result<(), MetricsError> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_traces(
    dir: &Path,
    traces: &[(String, Trace)],
    files: &mut Vec<PathBuf>,
) -> Result<(), MetricsError> {
    if traces.is_empty() {
        return Ok(());
    }
    let tdir = dir.join("traces");
    fs::create_dir_all(&tdir)?;
    for (name, t) in traces {
        let p = tdir.join(format!("{name}.jsonl"));
        fs::write(&p, t.to_jsonl())?;
        files.push(p);
    }
    Ok(())
}

fn sweep_csv(
    rows: &[SweepRow],
    x_name: &str,
    extra: impl Fn(&SweepRow) -> String,
    extra_header: &str,
) -> (String, Vec<String>) {
    let header = format!("{x_name},runs,t_ct_ms,t_bp_ms,t_cf_ms,t_bc_ms,messages{extra_header}");
    let lines = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{:.3},{:.3},{:.3},{:.3},{:.1}{}",
                r.x,
                r.runs,
                r.t_ct,
                r.t_bp,
                r.t_cf,
                r.t_bc,
                r.messages,
                extra(r)
            )
        })
        .collect();
    (header, lines)
}

/// Runs the named scenario and writes `summary.json`, `<name>.csv` and raw
/// traces under `out_dir`.
pub fn run_scenario(
    name: &str,
    settings: &ScenarioSettings,
    out_dir: &Path,
) -> Result<ScenarioOutcome, MetricsError> {
    if !SCENARIOS.iter().any(|(n, _)| *n == name) {
        return Err(MetricsError::UnknownScenario {
            name: name.to_string(),
            available: SCENARIOS.iter().map(|(n, _)| *n).collect(),
        });
    }
    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(format!("{name}.csv"));
    let mut files = vec![csv_path.clone()];
    let mut checks = BTreeMap::new();
    let mut unexpected_conflict = None;
    let results: Value = match name {
        "committee-size" => {
            let (rows, traces) = committee_size_sweep(settings)?;
            let ct = slope_of(&rows, |r| r.t_ct);
            let cf = slope_of(&rows, |r| r.t_cf);
            checks.insert("t_ct_slope_within_0.3_of_1".into(), (ct - 1.0).abs() <= 0.3);
            checks.insert("t_cf_slope_within_0.3_of_2".into(), (cf - 2.0).abs() <= 0.3);
            checks.insert(
                "t_cf_increasing".into(),
                rows.windows(2).all(|w| w[0].t_cf < w[1].t_cf),
            );
            let (h, lines) = sweep_csv(&rows, "k", |_| String::new(), "");
            write_csv(&csv_path, &h, lines)?;
            if settings.write_traces {
                write_traces(out_dir, &traces, &mut files)?;
            }
            json!({ "rows": rows, "t_ct_slope": ct, "t_cf_slope": cf, "t_bp_slope": slope_of(&rows, |r| r.t_bp) })
        }
        "block-size" => {
            let (rows, traces) = block_size_sweep(settings)?;
            let th: Vec<f64> = rows
                .iter()
                .map(|r| throughput(r.x, r.t_bc / 1000.0, 1000).map(|t| t.mb_per_hour))
                .collect::<Result<_, _>>()?;
            if th.len() == 4 {
                checks.insert(
                    "rise_then_fall".into(),
                    th[0] < th[1] && th[1] < th[2] && th[2] > th[3],
                );
            }
            let (h, lines) = sweep_csv(
                &rows,
                "block_bytes",
                |r| {
                    let t = throughput(r.x, r.t_bc / 1000.0, 1000).expect("positive t_bc");
                    format!(",{:.3},{:.3}", t.mb_per_hour, t.tx_per_s)
                },
                ",mb_per_hour,tx_per_s",
            );
            write_csv(&csv_path, &h, lines)?;
            if settings.write_traces {
                write_traces(out_dir, &traces, &mut files)?;
            }
            json!({ "rows": rows, "mb_per_hour": th })
        }
        "attacker-overtake" => {
            let points: Vec<(f64, u32)> = settings
                .overtake_shares
                .iter()
                .flat_map(|&p| settings.overtake_depths.iter().map(move |&m| (p, m)))
                .collect();
            let est: Vec<OvertakeEstimate> = par_map(&points, settings.workers, |&(p, m)| {
                overtake_monte_carlo(p, m, settings.overtake_trials, settings.seed)
            })
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(sim_err)?;
            let ok = est.iter().all(|e| {
                if e.p >= 0.5 {
                    e.rate > 0.99
                } else {
                    (e.rate - e.analytic).abs() <= 0.2 * e.analytic
                }
            });
            checks.insert("within_tolerance".into(), ok);
            write_csv(
                &csv_path,
                "p,m,trials,successes,rate,analytic,relative_error",
                est.iter().map(|e| {
                    format!(
                        "{},{},{},{},{:.6},{:.6},{:.4}",
                        e.p,
                        e.m,
                        e.trials,
                        e.successes,
                        e.rate,
                        e.analytic,
                        (e.rate - e.analytic) / e.analytic
                    )
                }),
            )?;
            json!({ "estimates": est })
        }
        "selfish-mining" => {
            let model = NetworkModel::new(SynchronyModel::fixed(5));
            let shares = settings.selfish_shares.clone();
            let revenue: Vec<f64> = par_map(&shares, settings.workers, |&p| {
                let s =
                    MiningScenario::selfish(p, 4, settings.selfish_blocks, 1000.0, model.clone());
                mining_run(&s, settings.seed).map(|r| r.revenue_share(0))
            })
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(sim_err)?;
            write_csv(
                &csv_path,
                "hash_power,revenue_share,excess",
                shares
                    .iter()
                    .zip(&revenue)
                    .map(|(p, r)| format!("{p},{r:.4},{:.4}", r - p)),
            )?;
            json!({ "hash_power": shares, "revenue_share": revenue })
        }
        "byzantine-safety" => {
            let runs = safety_runs(settings)?;
            let conflicts: usize = runs.iter().map(|(r, _)| r.conflicts).sum();
            let max_share = runs
                .iter()
                .map(|(r, _)| r.byzantine_share)
                .fold(0.0, f64::max);
            checks.insert("minority_never_conflicts".into(), conflicts == 0);
            if let Some((row, Some(rep))) = runs
                .iter()
                .find(|(r, rep)| r.conflicts > 0 && rep.is_some())
            {
                if let Some(c) = &rep.conflict {
                    let p = out_dir.join(format!("unexpected_conflict_{}.json", row.run));
                    write_evidence(&p, c)?;
                    files.push(p.clone());
                    unexpected_conflict = Some(p);
                }
            }
            let constructed =
                microchain_run(&majority_byzantine_scenario(), settings.seed).map_err(sim_err)?;
            let evidence = match &constructed.conflict {
                Some(c) => {
                    let p = out_dir.join("conflict_evidence.json");
                    write_evidence(&p, c)?;
                    files.push(p.clone());
                    Some(p)
                }
                None => None,
            };
            checks.insert("majority_conflict_detected".into(), evidence.is_some());
            if settings.write_traces {
                write_traces(
                    out_dir,
                    &[("byzantine-majority".to_string(), constructed.trace.clone())],
                    &mut files,
                )?;
            }
            write_csv(
                &csv_path,
                "run,validators,byzantine_share,conflicts,min_finalized_height",
                runs.iter().map(|(r, _)| {
                    format!(
                        "{},{},{:.4},{},{}",
                        r.run, r.validators, r.byzantine_share, r.conflicts, r.min_finalized_height
                    )
                }),
            )?;
            json!({
                "runs": runs.len(),
                "conflicting_runs": runs.iter().filter(|(r, _)| r.conflicts > 0).count(),
                "max_byzantine_share": max_share,
                "min_finalized_height": runs.iter().map(|(r, _)| r.min_finalized_height).min(),
                "constructed": {
                    "byzantine_share": byzantine_share(&majority_byzantine_scenario()),
                    "halted": constructed.halted.as_ref().map(|h| json!({"node": h.node, "time": h.time, "reason": h.reason})),
                    "evidence": evidence.as_ref().and_then(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()),
                },
            })
        }
        "message-complexity" => {
            let sweeps = [
                (SweepProtocol::Om { f: 1 }, vec![16, 32, 64], 2.0),
                (SweepProtocol::Om { f: 2 }, vec![16, 32, 64], 3.0),
                (SweepProtocol::Pbft, vec![4, 7, 10, 13, 16], 2.0),
                (SweepProtocol::Vr, vec![3, 5, 9, 17], 1.0),
                (SweepProtocol::Nakamoto, vec![4, 8, 16, 32], 1.0),
            ];
            let reports: Vec<ComplexityReport> =
                par_map(&sweeps, settings.workers, |(p, sizes, _)| {
                    complexity_sweep(*p, sizes, settings.seed)
                })
                .into_iter()
                .collect::<Result<_, _>>()?;
            let mut lines = Vec::new();
            for ((_, _, want), r) in sweeps.iter().zip(&reports) {
                checks.insert(
                    format!("{}_slope_within_0.3_of_{want}", r.protocol),
                    (r.slope - want).abs() <= 0.3,
                );
                for p in &r.points {
                    lines.push(format!("{},{},{}", r.protocol, p.size, p.total));
                }
            }
            write_csv(&csv_path, "protocol,size,messages", lines)?;
            json!({ "reports": reports })
        }
        _ => unreachable!("checked above"),
    };
    let summary = json!({
        "scenario": name,
        "seed": settings.seed,
        "settings": settings,
        "results": results,
        "checks": checks,
    });
    let summary_path = out_dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let _ = writeln!(text);
    fs::write(&summary_path, text)?;
    files.insert(0, summary_path);
    Ok(ScenarioOutcome {
        name: name.to_string(),
        summary,
        checks,
        files,
        unexpected_conflict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<u64> = (0..50).collect();
        assert_eq!(
            par_map(&xs, 7, |x| x * 2),
            xs.iter().map(|x| x * 2).collect::<Vec<_>>()
        );
        assert_eq!(par_map(&xs, 1, |x| x + 1)[49], 50);
    }

    #[test]
    fn unknown_name_lists_alternatives() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_scenario("warp-drive", &ScenarioSettings::default(), dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("committee-size") && msg.contains("byzantine-safety"),
            "{msg}"
        );
    }

    #[test]
    fn minority_rosters_stay_below_a_third() {
        for i in 0..200 {
            let s = minority_byzantine_scenario(5, i);
            assert!(byzantine_share(&s) < 1.0 / 3.0);
        }
        assert!(byzantine_share(&majority_byzantine_scenario()) >= 1.0 / 3.0);
    }

    #[test]
    fn overtake_scenario_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let settings = ScenarioSettings {
            overtake_shares: vec![0.3],
            overtake_depths: vec![3],
            overtake_trials: 20_000,
            ..Default::default()
        };
        let out = run_scenario("attacker-overtake", &settings, dir.path()).unwrap();
        assert!(out.all_checks_pass(), "{:?}", out.checks);
        let csv = fs::read_to_string(dir.path().join("attacker-overtake.csv")).unwrap();
        assert!(csv.starts_with("p,m,trials"));
        assert_eq!(csv.lines().count(), 2);
        let again = run_scenario("attacker-overtake", &settings, dir.path()).unwrap();
        assert_eq!(out.summary, again.summary);
    }
}

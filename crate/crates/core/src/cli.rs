//! The `microlab` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bft::pbft::{pbft_run, PbftScenario};
use crate::bft::vr::{vr_run, VrScenario};
use crate::config::{load_config, ConfigError, NodeFault, ProtocolKind, SimConfig};
use crate::ledger::{read_chain_file, write_chain, Block};
use crate::metrics::{list_scenarios, measure_latencies, run_scenario, ScenarioSettings};
use crate::microchain::{microchain_run, MicrochainScenario, ValidatorSpec};
use crate::nakamoto::{miner_keys, mining_run, MinerConfig, MinerPolicy, MiningScenario};
use crate::netsim::Trace;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SAFETY: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "microlab",
    version,
    about = "Deterministic consensus simulations and experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a configured simulation, or a named scenario with --scenario.
    Run(RunArgs),
    /// Re-validate every block of a persisted chain file.
    VerifyChain(VerifyArgs),
    /// Print the available scenarios.
    ListScenarios,
    /// Re-run a stored run from its seed and compare traces byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Simulation config, or scenario settings when --scenario is given.
    #[arg(long, value_name = "PATH", required_unless_present = "scenario")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "NAME")]
    pub scenario: Option<String>,
    /// Overrides the seed in the config.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Cap on parallel runs.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub chain: PathBuf,
    /// Defaults to the value in a config.toml beside the chain, else 10.
    #[arg(long)]
    pub epoch_length: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Directory written by `run --config`.
    pub run_dir: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error("safety violation: {message}; evidence: {}", evidence.display())]
    Safety { message: String, evidence: PathBuf },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_USAGE,
            CliError::Failed(_) => EXIT_FAILURE,
            CliError::Safety { .. } => EXIT_SAFETY,
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| failed(format!("cannot write {}: {e}", path.display())))
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    s
}

/// Everything a single configured run produces.
pub struct RunArtifacts {
    pub summary: Value,
    pub trace: Trace,
    pub chain: Option<Vec<Block>>,
    /// Description and evidence of a safety violation.
    pub violation: Option<(String, Value)>,
}

pub fn execute(cfg: &SimConfig) -> Result<RunArtifacts, CliError> {
    let n = cfg.nodes.len();
    match cfg.protocol {
        ProtocolKind::Microchain => {
            let validators = cfg
                .nodes
                .iter()
                .enumerate()
                .map(|(i, node)| ValidatorSpec {
                    seed: cfg.node_seed(i),
                    credit: node.credit,
                    fault: SimConfig::microchain_fault(node.fault),
                })
                .collect();
            let scenario = MicrochainScenario {
                validators,
                params: cfg.microchain.clone(),
                model: cfg.network.clone(),
                slots: cfg.run.slots,
                trace_level: cfg.run.trace,
            };
            let r = microchain_run(&scenario, cfg.seed).map_err(failed)?;
            let k = match cfg.microchain.committee_size {
                0 => n,
                c => c.min(n),
            };
            let latency = measure_latencies(&r.trace, k, cfg.microchain.block_bytes as u64).ok();
            let conflicts = r.conflicting_epochs();
            let validators: Vec<Value> = r
                .validators
                .iter()
                .map(|v| {
                    json!({
                        "index": v.index,
                        "fault": v.fault,
                        "finalized_height": v.finalized_height(),
                        "finalized": v.finalized,
                        "head_height": v.head_chain().len().saturating_sub(1),
                        "stats": v.stats,
                    })
                })
                .collect();
            let violation = match (&r.conflict, conflicts.is_empty()) {
                (Some(c), _) => Some((
                    format!("conflicting checkpoints finalized in epoch {}", c.epoch),
                    serde_json::to_value(c).expect("evidence serializes"),
                )),
                (None, false) => Some((
                    format!("conflicting checkpoints finalized in epochs {conflicts:?}"),
                    json!({ "conflicting_epochs": conflicts, "validators": validators }),
                )),
                (None, true) => None,
            };
            let chain_owner = r.honest().next().map_or(0, |v| v.index);
            let chain = r.validators[chain_owner].head_chain();
            let summary = json!({
                "protocol": cfg.protocol,
                "seed": cfg.seed,
                "end_time_ms": r.end_time,
                "messages": r.messages,
                "sent_by_kind": r.sent_by_kind,
                "min_honest_finalized_height": r.min_honest_finalized_height(),
                "conflicting_epochs": conflicts,
                "halted": r.halted.as_ref().map(|h| json!({"node": h.node, "time": h.time, "reason": h.reason})),
                "latency_ms": latency.as_ref().map(|l| json!({"k": l.k, "t_ct": l.t_ct, "t_bp": l.t_bp, "t_cf": l.t_cf, "t_bc": l.t_bc})),
                "chain": { "owner": chain_owner, "blocks": chain.len() },
                "validators": validators,
                "trace_digest": r.trace.digest().to_hex(),
            });
            Ok(RunArtifacts {
                summary,
                trace: r.trace,
                chain: Some(chain),
                violation,
            })
        }
        ProtocolKind::Pbft => {
            let mut s = PbftScenario::normal(n, cfg.run.requests, cfg.network.clone());
            s.gap_ms = cfg.run.request_gap_ms;
            s.reply_quorum = cfg.run.pbft_reply_quorum;
            s.faults = cfg
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, node)| SimConfig::pbft_fault(node.fault).map(|f| (i, f)))
                .collect();
            let r = pbft_run(&s, cfg.seed).map_err(failed)?;
            let identical = r.honest_logs_identical();
            let logs: Vec<Value> = r
                .replicas
                .iter()
                .enumerate()
                .map(|(i, rep)| {
                    json!({
                        "replica": i,
                        "faulty": r.faulty.contains(&i),
                        "view": rep.view(),
                        "executed": rep.executed().iter().map(|(seq, d)| json!([seq, d.to_hex()])).collect::<Vec<_>>(),
                    })
                })
                .collect();
            let summary = json!({
                "protocol": cfg.protocol,
                "seed": cfg.seed,
                "f": cfg.fault_threshold(),
                "end_time_ms": r.end_time,
                "messages": r.messages,
                "normal_case_messages": r.normal_case_messages(),
                "sent_by_kind": r.sent_by_kind,
                "completed_requests": r.client.completed().len(),
                "honest_logs_identical": identical,
                "replicas": logs,
                "trace_digest": r.trace.digest().to_hex(),
            });
            let violation = (!identical).then(|| {
                (
                    "honest replicas executed different logs".to_string(),
                    json!({ "replicas": summary["replicas"].clone() }),
                )
            });
            Ok(RunArtifacts {
                summary,
                trace: r.trace,
                chain: None,
                violation,
            })
        }
        ProtocolKind::Vr => {
            let mut s = VrScenario::normal(n, cfg.run.requests, cfg.network.clone());
            s.gap_ms = cfg.run.request_gap_ms;
            s.crash = cfg
                .nodes
                .iter()
                .enumerate()
                .find_map(|(i, node)| match node.fault {
                    NodeFault::Crash { at_ms, recover_ms } => Some((i, at_ms, recover_ms)),
                    _ => None,
                });
            let r = vr_run(&s, cfg.seed).map_err(failed)?;
            let consistent = r.prefix_consistent();
            let logs: Vec<Value> = r
                .replicas
                .iter()
                .enumerate()
                .map(|(i, rep)| json!({ "replica": i, "view": rep.view(), "executed": rep.executed().len() }))
                .collect();
            let summary = json!({
                "protocol": cfg.protocol,
                "seed": cfg.seed,
                "f": cfg.fault_threshold(),
                "end_time_ms": r.end_time,
                "messages": r.messages,
                "sent_by_kind": r.sent_by_kind,
                "completed_requests": r.client.completed().len(),
                "crashed_at_end": r.crashed_at_end,
                "prefix_consistent": consistent,
                "replicas": logs,
                "trace_digest": r.trace.digest().to_hex(),
            });
            let violation = (!consistent).then(|| {
                (
                    "replica logs are not prefixes of one another".to_string(),
                    json!({ "replicas": summary["replicas"].clone() }),
                )
            });
            Ok(RunArtifacts {
                summary,
                trace: r.trace,
                chain: None,
                violation,
            })
        }
        ProtocolKind::Nakamoto => {
            let miners = cfg
                .nodes
                .iter()
                .enumerate()
                .map(|(i, node)| MinerConfig {
                    pk: miner_keys(cfg.node_seed(i)).public(),
                    hash_power: node.credit as f64,
                    policy: if node.fault == NodeFault::Selfish {
                        MinerPolicy::SelfishMining
                    } else {
                        MinerPolicy::HonestGossip
                    },
                })
                .collect();
            let mut s = MiningScenario::with_miners(
                miners,
                cfg.run.blocks,
                cfg.run.block_interval_ms,
                cfg.network.clone(),
            );
            s.trace_level = cfg.run.trace;
            let r = mining_run(&s, cfg.seed).map_err(failed)?;
            let summary = json!({
                "protocol": cfg.protocol,
                "seed": cfg.seed,
                "end_time_ms": r.end_time,
                "messages": r.messages,
                "sent_by_kind": r.sent_by_kind,
                "blocks_mined": r.blocks_mined,
                "chain_length": r.chain_producers.len(),
                "revenue_share": (0..n).map(|i| r.revenue_share(i)).collect::<Vec<_>>(),
                "trace_digest": r.trace.digest().to_hex(),
            });
            Ok(RunArtifacts {
                summary,
                trace: r.trace,
                chain: None,
                violation: None,
            })
        }
    }
}

fn run_config(args: &RunArgs, path: &Path) -> Result<(), CliError> {
    let mut cfg = load_config(path)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.protocol, cfg.seed)));
    cfg.out = Some(out.clone());
    fs::create_dir_all(&out)
        .map_err(|e| failed(format!("cannot create {}: {e}", out.display())))?;
    let art = execute(&cfg)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    write(&out.join("summary.json"), pretty(&art.summary))?;
    write(&out.join("trace.jsonl"), art.trace.to_jsonl())?;
    if let Some(chain) = &art.chain {
        let p = out.join("chain.bin");
        write_chain(&p, chain).map_err(|e| failed(format!("cannot write {}: {e}", p.display())))?;
    }
    println!(
        "{} run, seed {}: reports in {}",
        cfg.protocol,
        cfg.seed,
        out.display()
    );
    if let Some((message, evidence)) = art.violation {
        let p = out.join("evidence.json");
        write(&p, pretty(&evidence))?;
        return Err(CliError::Safety {
            message,
            evidence: p,
        });
    }
    Ok(())
}

fn load_settings(path: &Path) -> Result<ScenarioSettings, CliError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_path_to_error::deserialize(toml::Deserializer::new(&text)).map_err(|e| {
        CliError::Config(ConfigError::Schema {
            path: path.to_path_buf(),
            key: e.path().to_string(),
            message: e.into_inner().message().to_string(),
        })
    })
}

fn run_named(args: &RunArgs, name: &str) -> Result<(), CliError> {
    let mut settings = match &args.config {
        Some(p) => load_settings(p)?,
        None => ScenarioSettings::default(),
    };
    if let Some(seed) = args.seed {
        settings.seed = seed;
    }
    if let Some(w) = args.workers {
        settings.workers = w as usize;
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{name}")));
    let outcome = run_scenario(name, &settings, &out).map_err(|e| match e {
        crate::metrics::MetricsError::UnknownScenario { .. } => CliError::Usage(e.to_string()),
        other => failed(other),
    })?;
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    for (check, ok) in &outcome.checks {
        println!("{} {check}", if *ok { "pass" } else { "FAIL" });
    }
    if let Some(p) = outcome.unexpected_conflict {
        return Err(CliError::Safety {
            message: format!("scenario {name} finalized conflicting checkpoints"),
            evidence: p,
        });
    }
    if !outcome.all_checks_pass() {
        return Err(failed(format!("scenario {name}: some checks failed")));
    }
    Ok(())
}

fn verify_chain(args: &VerifyArgs) -> Result<(), CliError> {
    let epoch_length = match args.epoch_length {
        Some(e) => e,
        None => {
            let beside = args
                .chain
                .parent()
                .map(|d| d.join("config.toml"))
                .filter(|p| p.exists());
            match beside {
                Some(p) => load_config(&p)?.microchain.epoch_length,
                None => 10,
            }
        }
    };
    if epoch_length == 0 {
        return Err(CliError::Usage("--epoch-length must be positive".into()));
    }
    let loaded = read_chain_file(&args.chain, epoch_length)
        .map_err(|e| failed(format!("{}: {e}", args.chain.display())))?;
    let tip = loaded.blocks.last().map_or(0, |b| b.header.height);
    println!(
        "{}: {} blocks valid, tip height {tip}",
        args.chain.display(),
        loaded.blocks.len()
    );
    Ok(())
}

fn replay(args: &ReplayArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.run_dir.join("config.toml"))?;
    let trace_path = args.run_dir.join("trace.jsonl");
    let stored = fs::read(&trace_path)
        .map_err(|e| failed(format!("cannot read {}: {e}", trace_path.display())))?;
    let fresh = execute(&cfg)?.trace.to_jsonl();
    if fresh == stored {
        println!(
            "replay identical: {} bytes, {} records",
            fresh.len(),
            fresh.iter().filter(|b| **b == b'\n').count()
        );
        return Ok(());
    }
    let old = String::from_utf8_lossy(&stored);
    let new = String::from_utf8_lossy(&fresh);
    let line = old
        .lines()
        .zip(new.lines())
        .position(|(a, b)| a != b)
        .unwrap_or_else(|| old.lines().count().min(new.lines().count()));
    Err(failed(format!(
        "replay diverges from {} at line {}",
        trace_path.display(),
        line + 1
    )))
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(args) => match (&args.scenario, &args.config) {
            (Some(name), _) => run_named(args, name),
            (None, Some(path)) => run_config(args, path),
            (None, None) => Err(CliError::Usage("run needs --config or --scenario".into())),
        },
        Command::VerifyChain(args) => verify_chain(args),
        Command::ListScenarios => {
            for (name, about) in list_scenarios() {
                println!("{name:<20} {about}");
            }
            Ok(())
        }
        Command::Replay(args) => replay(args),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("microlab: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("cfg.toml");
        fs::write(&p, body).unwrap();
        p
    }

    fn run(args: &[&str]) -> i32 {
        main_with_args(std::iter::once("microlab").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(&[]), EXIT_USAGE);
        assert_eq!(run(&["run"]), EXIT_USAGE);
        assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
        assert_eq!(
            run(&["run", "--scenario", "nope", "--out", "/tmp/microlab-none"]),
            EXIT_USAGE
        );
        assert_eq!(run(&["list-scenarios"]), EXIT_OK);
    }

    #[test]
    fn run_replay_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(
            dir.path(),
            "protocol = \"microchain\"\nseed = 4\nnodes = [{}, {credit = 2}, {}, {}]\n[run]\nslots = 25\n[microchain]\nepoch_length = 5\n",
        );
        let out = dir.path().join("out");
        let code = run(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "11",
        ]);
        assert_eq!(code, EXIT_OK);
        for f in ["summary.json", "trace.jsonl", "chain.bin", "config.toml"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        let summary: Value =
            serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["seed"], 11);
        assert!(summary["min_honest_finalized_height"].as_u64().unwrap() >= 15);
        assert_eq!(run(&["replay", out.to_str().unwrap()]), EXIT_OK);
        assert_eq!(
            run(&["verify-chain", out.join("chain.bin").to_str().unwrap()]),
            EXIT_OK
        );

        // a tampered trace no longer replays
        let mut t = fs::read(out.join("trace.jsonl")).unwrap();
        let i = t.len() / 2;
        t[i] = if t[i] == b'0' { b'1' } else { b'0' };
        fs::write(out.join("trace.jsonl"), t).unwrap();
        assert_eq!(run(&["replay", out.to_str().unwrap()]), EXIT_FAILURE);
    }

    #[test]
    fn config_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(
            dir.path(),
            "protocol = \"pbft\"\nseed = 1\nnodes = [{}, {}, {}]\n[run]\nf = 1\n",
        );
        assert_eq!(run(&["run", "--config", cfg.to_str().unwrap()]), EXIT_USAGE);
    }

    #[test]
    fn identical_reruns_give_identical_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "protocol = \"pbft\"\nseed = 3\nnodes = [{}, {}, {}, {fault = {kind = \"equivocate\"}}]\n[run]\nrequests = 3\n");
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        for out in [&a, &b] {
            assert_eq!(
                run(&[
                    "run",
                    "--config",
                    cfg.to_str().unwrap(),
                    "--out",
                    out.to_str().unwrap()
                ]),
                EXIT_OK
            );
        }
        for f in ["summary.json", "trace.jsonl"] {
            assert_eq!(
                fs::read(a.join(f)).unwrap(),
                fs::read(b.join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn majority_double_voting_exits_three() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(
            dir.path(),
            "protocol = \"microchain\"\nseed = 1\n[run]\nslots = 200\ntrace = \"marks_only\"\n[microchain]\nepoch_length = 5\n\n\
             [[nodes]]\ncredit = 1\n[[nodes]]\ncredit = 1\n\
             [[nodes]]\ncredit = 3\nfault = { kind = \"double_vote\" }\n\
             [[nodes]]\ncredit = 3\nfault = { kind = \"double_vote\" }\n",
        );
        let out = dir.path().join("out");
        let code = run(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_SAFETY);
        let ev: Value =
            serde_json::from_slice(&fs::read(out.join("evidence.json")).unwrap()).unwrap();
        assert!(ev["epoch"].is_u64(), "{ev}");
    }
}

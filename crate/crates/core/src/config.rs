//! TOML run configuration.
//!
//! ```toml
//! protocol = "microchain"   # microchain | pbft | vr | nakamoto
//! seed = 7
//!
//! [network.synchrony]
//! kind = "synchronous"
//! min_ms = 5
//! delta_ms = 20
//!
//! [[nodes]]
//! credit = 3
//! fault = { kind = "double_vote" }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bft::pbft::PbftFault;
use crate::bft::{max_faults, quorum_params, Protocol};
use crate::microchain::{MicrochainParams, ValidatorFault};
use crate::netsim::{NetworkModel, SimTime, SynchronyModel, TraceLevel};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: at `{key}`: {message}")]
    Schema {
        path: PathBuf,
        key: String,
        message: String,
    },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Microchain,
    Pbft,
    Vr,
    Nakamoto,
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolKind::Microchain => "microchain",
            ProtocolKind::Pbft => "pbft",
            ProtocolKind::Vr => "vr",
            ProtocolKind::Nakamoto => "nakamoto",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NodeFault {
    #[default]
    Honest,
    /// Double votes in microchain, conflicting pre-prepares in PBFT.
    #[serde(alias = "double_vote")]
    Equivocate,
    Silent,
    Crash {
        at_ms: SimTime,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        recover_ms: Option<SimTime>,
    },
    /// Nakamoto only: withholds blocks to fork honest miners.
    Selfish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    /// Key seed; defaults to an index-derived one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Credit for microchain validators, hash power for miners.
    #[serde(default = "one")]
    pub credit: u64,
    #[serde(default)]
    pub fault: NodeFault,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Microchain slots to simulate.
    pub slots: u64,
    /// Client requests for PBFT and VR.
    pub requests: u64,
    pub request_gap_ms: u64,
    /// Tolerated faults for PBFT and VR; defaults to the most the roster allows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f: Option<usize>,
    /// Client replies PBFT waits for: `2f+1` or `f+1`.
    pub pbft_reply_quorum: crate::bft::pbft::ReplyQuorum,
    /// Nakamoto blocks to aim for and the mean interval between them.
    pub blocks: u64,
    pub block_interval_ms: f64,
    pub trace: TraceLevel,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            slots: 60,
            requests: 1,
            request_gap_ms: 0,
            f: None,
            pbft_reply_quorum: Default::default(),
            blocks: 100,
            block_interval_ms: 10_000.0,
            trace: TraceLevel::Full,
        }
    }
}

fn default_network() -> NetworkModel {
    NetworkModel::new(SynchronyModel::Synchronous {
        min_ms: 5,
        delta_ms: 20,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub protocol: ProtocolKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "default_network")]
    pub network: NetworkModel,
    #[serde(default)]
    pub microchain: MicrochainParams,
    #[serde(default)]
    pub run: RunConfig,
    pub nodes: Vec<NodeConfig>,
}

impl SimConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let cfg: SimConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            ConfigError::Schema {
                path: path.to_path_buf(),
                key: if key == "." { "(root)".into() } else { key },
                message: e.into_inner().message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fault threshold used for PBFT and VR.
    pub fn fault_threshold(&self) -> usize {
        match self.protocol {
            ProtocolKind::Pbft => self
                .run
                .f
                .unwrap_or_else(|| max_faults(Protocol::Pbft, self.nodes.len())),
            ProtocolKind::Vr => self
                .run
                .f
                .unwrap_or_else(|| max_faults(Protocol::Vr, self.nodes.len())),
            _ => 0,
        }
    }

    pub fn node_seed(&self, i: usize) -> u64 {
        self.nodes[i].seed.unwrap_or(match self.protocol {
            ProtocolKind::Microchain => 1000 + i as u64,
            _ => i as u64,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(invalid("nodes", "at least one node is required"));
        }
        self.network
            .synchrony
            .validate()
            .map_err(|m| invalid("network.synchrony", m))?;
        if let Some(m) = &self.network.medium {
            if !(m.per_message_ms.is_finite() && m.per_message_ms >= 0.0) {
                return Err(invalid(
                    "network.medium.per_message_ms",
                    "must be a non-negative number",
                ));
            }
            if matches!(m.bytes_per_ms, Some(b) if !(b.is_finite() && b > 0.0)) {
                return Err(invalid("network.medium.bytes_per_ms", "must be positive"));
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            self.check_fault(i, node.fault)?;
        }
        match self.protocol {
            ProtocolKind::Microchain => {
                self.microchain
                    .validate()
                    .map_err(|e| invalid("microchain", e.to_string()))?;
                if self.run.slots == 0 {
                    return Err(invalid("run.slots", "must be positive"));
                }
                if self.nodes.iter().all(|n| n.credit == 0) {
                    return Err(invalid("nodes", "total credit must be positive"));
                }
            }
            ProtocolKind::Pbft | ProtocolKind::Vr => {
                let (proto, name) = if self.protocol == ProtocolKind::Pbft {
                    (Protocol::Pbft, "pbft")
                } else {
                    (Protocol::Vr, "vr")
                };
                let f = self.fault_threshold();
                let q = quorum_params(proto, f);
                if !q.feasible(n) {
                    return Err(invalid(
                        "run.f",
                        format!(
                            "quorum infeasible: {name} with f={f} needs at least {} replicas, roster has {n}",
                            q.n_min
                        ),
                    ));
                }
                let faulty = self
                    .nodes
                    .iter()
                    .filter(|x| x.fault != NodeFault::Honest)
                    .count();
                if faulty > f {
                    return Err(invalid(
                        "nodes",
                        format!("{faulty} faulty nodes exceed f={f}"),
                    ));
                }
                if self.run.requests == 0 {
                    return Err(invalid("run.requests", "must be positive"));
                }
            }
            ProtocolKind::Nakamoto => {
                if !(self.run.block_interval_ms.is_finite() && self.run.block_interval_ms > 0.0) {
                    return Err(invalid("run.block_interval_ms", "must be positive"));
                }
                if self.run.blocks == 0 {
                    return Err(invalid("run.blocks", "must be positive"));
                }
                if self.nodes.iter().all(|n| n.credit == 0) {
                    return Err(invalid("nodes", "total hash power must be positive"));
                }
            }
        }
        Ok(())
    }

    fn check_fault(&self, i: usize, fault: NodeFault) -> Result<(), ConfigError> {
        let unsupported = || {
            Err(invalid(
                format!("nodes[{i}].fault"),
                format!("{fault:?} is not supported by {}", self.protocol),
            ))
        };
        match (self.protocol, fault) {
            (_, NodeFault::Honest) => Ok(()),
            (
                _,
                NodeFault::Crash {
                    at_ms,
                    recover_ms: Some(r),
                },
            ) if r <= at_ms => Err(invalid(
                format!("nodes[{i}].fault.recover_ms"),
                "must come after at_ms",
            )),
            (ProtocolKind::Microchain, NodeFault::Selfish) => unsupported(),
            (ProtocolKind::Microchain, _) => Ok(()),
            (
                ProtocolKind::Pbft,
                NodeFault::Crash {
                    recover_ms: Some(_),
                    ..
                },
            ) => Err(invalid(
                format!("nodes[{i}].fault.recover_ms"),
                "pbft replicas do not recover",
            )),
            (ProtocolKind::Pbft, NodeFault::Selfish) => unsupported(),
            (ProtocolKind::Pbft, _) => Ok(()),
            (ProtocolKind::Vr, NodeFault::Crash { .. }) => {
                let crashes = self
                    .nodes
                    .iter()
                    .filter(|n| matches!(n.fault, NodeFault::Crash { .. }))
                    .count();
                if crashes > 1 {
                    Err(invalid("nodes", "vr runs support one crashed replica"))
                } else {
                    Ok(())
                }
            }
            (ProtocolKind::Vr, _) => unsupported(),
            (ProtocolKind::Nakamoto, NodeFault::Selfish) => Ok(()),
            (ProtocolKind::Nakamoto, _) => unsupported(),
        }
    }

    pub fn microchain_fault(fault: NodeFault) -> ValidatorFault {
        match fault {
            NodeFault::Honest | NodeFault::Selfish => ValidatorFault::Honest,
            NodeFault::Equivocate => ValidatorFault::DoubleVote,
            NodeFault::Silent => ValidatorFault::Silent,
            NodeFault::Crash { at_ms, recover_ms } => ValidatorFault::Crash { at_ms, recover_ms },
        }
    }

    pub fn pbft_fault(fault: NodeFault) -> Option<PbftFault> {
        match fault {
            NodeFault::Equivocate => Some(PbftFault::Equivocate),
            NodeFault::Silent => Some(PbftFault::Silent),
            NodeFault::Crash { at_ms, .. } => Some(PbftFault::Crash { at: at_ms }),
            NodeFault::Honest | NodeFault::Selfish => None,
        }
    }
}

pub fn load_config(path: &Path) -> Result<SimConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    SimConfig::parse(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<SimConfig, ConfigError> {
        SimConfig::parse(s, Path::new("test.toml"))
    }

    const MINIMAL: &str = "protocol = \"microchain\"\nseed = 9\nnodes = [{}, {}, {}, {}]\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.nodes.len(), 4);
        assert_eq!(c.nodes[0].credit, 1);
        assert_eq!(c.microchain, MicrochainParams::default());
        assert_eq!(c.run, RunConfig::default());
        assert_eq!(c.network, default_network());
        assert_eq!(c.node_seed(2), 1002);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = parse(MINIMAL).unwrap();
        c.nodes[1].fault = NodeFault::Crash {
            at_ms: 5000,
            recover_ms: Some(9000),
        };
        c.run.f = Some(1);
        let back = parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn seed_is_required() {
        let err = parse("protocol = \"vr\"\nnodes = [{}, {}, {}]\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn pbft_three_replicas_one_fault_is_rejected() {
        let err = parse("protocol = \"pbft\"\nseed = 1\nnodes = [{}, {}, {}]\n[run]\nf = 1\n")
            .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("quorum infeasible") && msg.contains("at least 4"),
            "{msg}"
        );
        // without an explicit f the roster tolerates none
        assert_eq!(
            parse("protocol = \"pbft\"\nseed = 1\nnodes = [{}, {}, {}]\n")
                .unwrap()
                .fault_threshold(),
            0
        );
    }

    #[test]
    fn unknown_keys_are_named_with_their_path() {
        let err = parse(&format!("{MINIMAL}[microchain]\nslot_length = 3\n")).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("slot_length") && msg.contains("microchain"),
            "{msg}"
        );
        let err = parse(&format!("{MINIMAL}colour = 1\n")).unwrap_err();
        assert!(err.to_string().contains("colour"));
        let err = parse("protocol = \"vr\"\nseed = 1\nnodes = [{}, {}, {fault = {kind = \"crash\", when = 3}}]\n")
            .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("nodes[2].fault") || msg.contains("nodes.2.fault"),
            "{msg}"
        );
    }

    #[test]
    fn wrong_types_name_expected_form() {
        let err = parse("protocol = \"microchain\"\nseed = \"x\"\nnodes = [{}]\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("seed") && msg.contains("u64"), "{msg}");
        let err = parse("protocol = \"raft\"\nseed = 1\nnodes = [{}]\n").unwrap_err();
        assert!(err.to_string().contains("pbft"), "{err}");
    }

    #[test]
    fn durations_and_faults_are_checked() {
        let e = parse(&format!("{MINIMAL}[microchain]\nslot_ms = 0\n")).unwrap_err();
        assert!(e.to_string().contains("slot_ms"), "{e}");
        let e = parse(
            "protocol = \"nakamoto\"\nseed = 1\nnodes = [{}]\n[run]\nblock_interval_ms = 0.0\n",
        )
        .unwrap_err();
        assert!(e.to_string().contains("block_interval_ms"));
        let e = parse(
            "protocol = \"vr\"\nseed = 1\nnodes = [{}, {}, {fault = {kind = \"equivocate\"}}]\n",
        )
        .unwrap_err();
        assert!(e.to_string().contains("not supported by vr"), "{e}");
        let e = parse(&format!(
            "{MINIMAL}[network.synchrony]\nkind = \"synchronous\"\nmin_ms = 9\ndelta_ms = 3\n"
        ))
        .unwrap_err();
        assert!(e.to_string().contains("network.synchrony"));
        let c = parse("protocol = \"microchain\"\nseed = 1\nnodes = [{fault = {kind = \"double_vote\"}}, {}]\n")
            .unwrap();
        assert_eq!(
            SimConfig::microchain_fault(c.nodes[0].fault),
            ValidatorFault::DoubleVote
        );
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::bft::om::{om_run, OmValue};
use crate::bft::pbft::{pbft_run, PbftScenario};
use crate::bft::vr::{vr_run, VrScenario};
use crate::nakamoto::{mining_run, MiningScenario};
use crate::netsim::{AdversarySpec, NetworkModel, SynchronyModel, TraceLevel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityPoint {
    pub size: usize,
    pub total: u64,
    /// Messages per kind, straight from the simulator's send counter.
    pub per_phase: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub protocol: String,
    pub points: Vec<ComplexityPoint>,
    /// Least-squares slope of ln(total) against ln(size).
    pub slope: f64,
}

/// Ordinary least squares slope in log-log space. `None` for fewer than two
/// distinct sizes or any non-positive value.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return None;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

pub fn message_complexity(protocol: &str, mut points: Vec<ComplexityPoint>) -> ComplexityReport {
    points.sort_by_key(|p| p.size);
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.size as f64, p.total as f64))
        .collect();
    ComplexityReport {
        protocol: protocol.to_string(),
        slope: loglog_slope(&xy).unwrap_or(f64::NAN),
        points,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum SweepProtocol {
    Om {
        f: usize,
    },
    Pbft,
    Vr,
    /// Block gossip per mined block.
    Nakamoto,
}

impl SweepProtocol {
    pub fn label(&self) -> String {
        match self {
            SweepProtocol::Om { f } => format!("om{f}"),
            SweepProtocol::Pbft => "pbft".into(),
            SweepProtocol::Vr => "vr".into(),
            SweepProtocol::Nakamoto => "nakamoto".into(),
        }
    }
}

fn kinds(map: &BTreeMap<&'static str, u64>) -> BTreeMap<String, u64> {
    map.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// One failure-free run per size; PBFT and VR process a single request.
pub fn complexity_sweep(
    protocol: SweepProtocol,
    sizes: &[usize],
    seed: u64,
) -> Result<ComplexityReport, MetricsError> {
    let sim = |e: String| MetricsError::Sim(e);
    let model = NetworkModel::new(SynchronyModel::Synchronous {
        min_ms: 5,
        delta_ms: 20,
    });
    let mut points = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let point = match protocol {
            SweepProtocol::Om { f } => {
                let out = om_run(&model, n, f, OmValue(1), AdversarySpec::honest(), seed)
                    .map_err(|e| sim(e.to_string()))?;
                let mut per_phase = BTreeMap::new();
                per_phase.insert("order".to_string(), out.messages);
                ComplexityPoint {
                    size: n,
                    total: out.messages,
                    per_phase,
                }
            }
            SweepProtocol::Pbft => {
                let r = pbft_run(&PbftScenario::normal(n, 1, model.clone()), seed)
                    .map_err(|e| sim(e.to_string()))?;
                ComplexityPoint {
                    size: n,
                    total: r.normal_case_messages(),
                    per_phase: kinds(&r.sent_by_kind),
                }
            }
            SweepProtocol::Vr => {
                let r = vr_run(&VrScenario::normal(n, 1, model.clone()), seed)
                    .map_err(|e| sim(e.to_string()))?;
                ComplexityPoint {
                    size: n,
                    total: r.messages,
                    per_phase: kinds(&r.sent_by_kind),
                }
            }
            SweepProtocol::Nakamoto => {
                let mut s = MiningScenario::honest(n, 50, 1000.0, model.clone());
                s.trace_level = TraceLevel::MarksOnly;
                let r = mining_run(&s, seed).map_err(|e| sim(e.to_string()))?;
                let per_block = (r.messages as f64 / r.blocks_mined.max(1) as f64).round() as u64;
                ComplexityPoint {
                    size: n,
                    total: per_block,
                    per_phase: kinds(&r.sent_by_kind),
                }
            }
        };
        points.push(point);
    }
    Ok(message_complexity(&protocol.label(), points))
}

//! Oral Messaging OM(f) over the simulated network.
//!
//! Every relay carries the path of nodes the order has passed through,
//! commander first. A lieutenant relays each value whose path is at most
//! `f` long to every node not on the path, so the whole recursion runs in
//! `f+1` hops. At the decision deadline each lieutenant folds the tree of
//! received values bottom-up with [`majority`]. Missing values read as
//! [`OmValue::RETREAT`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{majority, max_faults, Protocol};
use crate::codec::Writer;
use crate::netsim::{
    AdversarySpec, Behavior, Context, Message, NetworkModel, Node, NodeId, SimError, Simulation,
    Substitution, SynchronyModel, Trace,
};

const DECIDE_TIMER: u64 = 1;

/// An order. The domain is totally ordered and its minimum, retreat, is
/// the default for absent messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OmValue(pub u8);

impl OmValue {
    pub const RETREAT: OmValue = OmValue(0);
    pub const ATTACK: OmValue = OmValue(1);
    pub const DEFAULT: OmValue = OmValue::RETREAT;
}

impl fmt::Display for OmValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => f.write_str("retreat"),
            1 => f.write_str("attack"),
            v => write!(f, "v{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OmMessage {
    pub path: Vec<NodeId>,
    pub value: OmValue,
}

impl Message for OmMessage {
    fn tag(&self) -> u8 {
        0x20
    }

    fn kind(&self) -> &'static str {
        "om"
    }

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.tag());
        w.u32(self.path.len() as u32);
        for &p in &self.path {
            w.u32(p as u32);
        }
        w.u8(self.value.0);
        w.finish()
    }
}

pub struct OmNode {
    id: NodeId,
    n: usize,
    f: usize,
    commander: NodeId,
    order: Option<OmValue>,
    deadline: u64,
    received: BTreeMap<Vec<NodeId>, OmValue>,
    rejected: u64,
    decision: Option<OmValue>,
}

impl OmNode {
    pub fn decision(&self) -> Option<OmValue> {
        self.decision
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    fn accepts(&self, from: NodeId, path: &[NodeId]) -> bool {
        let mut seen = vec![false; self.n];
        let distinct = path
            .iter()
            .all(|&p| p < self.n && !std::mem::replace(&mut seen[p], true));
        distinct
            && !path.is_empty()
            && path.len() <= self.f + 1
            && path[0] == self.commander
            && path.last() == Some(&from)
            && !path.contains(&self.id)
            && !self.received.contains_key(path)
    }

    fn resolve(&self, path: &mut Vec<NodeId>) -> OmValue {
        let own = self
            .received
            .get(path.as_slice())
            .copied()
            .unwrap_or(OmValue::DEFAULT);
        if path.len() == self.f + 1 {
            return own;
        }
        let mut values = vec![own];
        for j in 0..self.n {
            if j != self.id && !path.contains(&j) {
                path.push(j);
                values.push(self.resolve(path));
                path.pop();
            }
        }
        majority(&values)
    }
}

impl Node for OmNode {
    type Msg = OmMessage;

    fn on_start(&mut self, ctx: &mut Context<'_, OmMessage>) {
        if let Some(v) = self.order {
            ctx.broadcast(OmMessage {
                path: vec![self.id],
                value: v,
            });
            self.decision = Some(v);
            ctx.mark("decide", v.to_string());
        } else {
            ctx.set_timer(self.deadline, DECIDE_TIMER);
        }
    }

    fn on_message(&mut self, ctx: &mut Context<'_, OmMessage>, from: NodeId, msg: OmMessage) {
        if self.decision.is_some() || !self.accepts(from, &msg.path) {
            self.rejected += 1;
            return;
        }
        self.received.insert(msg.path.clone(), msg.value);
        if msg.path.len() <= self.f {
            let mut path = msg.path;
            let targets: Vec<NodeId> = (0..self.n)
                .filter(|j| *j != self.id && !path.contains(j))
                .collect();
            path.push(self.id);
            ctx.multicast(
                &targets,
                OmMessage {
                    path,
                    value: msg.value,
                },
            );
        }
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, OmMessage>, _timer: u64) {
        if self.decision.is_none() {
            let v = self.resolve(&mut vec![self.commander]);
            self.decision = Some(v);
            ctx.mark("decide", v.to_string());
        }
    }

    fn snapshot(&self) -> Option<String> {
        self.decision.map(|d| d.to_string())
    }
}

#[derive(Debug, Error)]
pub enum OmError {
    #[error("OM needs a synchronous network model")]
    NotSynchronous,
    #[error("need at least two nodes and a commander among them (n={n}, commander={commander})")]
    BadRoster { n: usize, commander: NodeId },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone)]
pub struct OmOutcome {
    pub n: usize,
    pub f: usize,
    pub commander: NodeId,
    pub commander_value: OmValue,
    pub commander_loyal: bool,
    /// Decisions of loyal nodes, the commander included when loyal.
    pub decisions: BTreeMap<NodeId, OmValue>,
    pub messages: u64,
    /// False when `n <= 3f`: no algorithm can guarantee agreement.
    pub agreement_possible: bool,
    pub trace: Trace,
}

impl OmOutcome {
    /// IC1: all loyal lieutenants decide alike.
    pub fn agreement(&self) -> bool {
        let mut lieutenants = self
            .decisions
            .iter()
            .filter(|(id, _)| **id != self.commander)
            .map(|(_, v)| v);
        match lieutenants.next() {
            Some(first) => lieutenants.all(|v| v == first),
            None => true,
        }
    }

    /// IC2: with a loyal commander, every loyal lieutenant obeys it.
    pub fn validity(&self) -> bool {
        !self.commander_loyal || self.decisions.values().all(|v| *v == self.commander_value)
    }

    pub fn loyal_decisions_agree(&self) -> bool {
        self.agreement() && self.validity()
    }
}

/// Runs OM(f) with node 0 as commander. Traitors are whichever nodes
/// `adversary` corrupts.
pub fn om_run(
    model: &NetworkModel,
    n: usize,
    f: usize,
    commander_value: OmValue,
    adversary: AdversarySpec<OmMessage>,
    seed: u64,
) -> Result<OmOutcome, OmError> {
    om_run_with_commander(model, n, f, 0, commander_value, adversary, seed)
}

pub fn om_run_with_commander(
    model: &NetworkModel,
    n: usize,
    f: usize,
    commander: NodeId,
    commander_value: OmValue,
    adversary: AdversarySpec<OmMessage>,
    seed: u64,
) -> Result<OmOutcome, OmError> {
    let delta = match model.synchrony {
        SynchronyModel::Synchronous { delta_ms, .. } => delta_ms,
        _ => return Err(OmError::NotSynchronous),
    };
    if n < 2 || commander >= n {
        return Err(OmError::BadRoster { n, commander });
    }
    let medium_slack = model.medium.as_ref().map_or(0, |m| {
        let per = m.occupancy_ms(
            OmMessage {
                path: vec![0; f + 1],
                value: commander_value,
            }
            .wire_len(),
        );
        (per * om_message_count(n, f) as f64).ceil() as u64
    });
    let deadline = (f as u64 + 1) * (delta + 1) + medium_slack + 1;
    let nodes = (0..n)
        .map(|id| OmNode {
            id,
            n,
            f,
            commander,
            order: (id == commander).then_some(commander_value),
            deadline,
            received: BTreeMap::new(),
            rejected: 0,
            decision: None,
        })
        .collect();
    let traitors: Vec<NodeId> = adversary.corrupted().collect();
    let mut sim = Simulation::new(nodes, model.clone(), adversary, seed);
    sim.run(None)?;
    let decisions = (0..n)
        .filter(|id| !traitors.contains(id))
        .filter_map(|id| sim.node(id).decision().map(|d| (id, d)))
        .collect();
    Ok(OmOutcome {
        n,
        f,
        commander,
        commander_value,
        commander_loyal: !traitors.contains(&commander),
        decisions,
        messages: sim.stats().sent,
        agreement_possible: f <= max_faults(Protocol::Om, n),
        trace: sim.into_trace(),
    })
}

/// Messages sent by OM(f) among `n` nodes when everyone relays:
/// `sum_{k=1}^{f+1} prod_{j=1}^{k} (n-j)`.
pub fn om_message_count(n: usize, f: usize) -> u64 {
    let mut total = 0u64;
    let mut term = 1u64;
    for k in 1..=(f + 1) {
        if k >= n {
            break;
        }
        term = term.saturating_mul((n - k) as u64);
        total = total.saturating_add(term);
    }
    total
}

/// A traitor whose every outbound value is looked up by `(recipient, path)`;
/// `None` withholds, and unlisted messages go out unchanged.
pub fn table_traitor(
    table: BTreeMap<(NodeId, Vec<NodeId>), Option<OmValue>>,
) -> Behavior<OmMessage> {
    Behavior::Equivocate(Box::new(
        move |_from: NodeId, to: NodeId, msg: &OmMessage| match table.get(&(to, msg.path.clone())) {
            None => Substitution::Keep,
            Some(None) => Substitution::Drop,
            Some(Some(v)) => Substitution::Replace(OmMessage {
                path: msg.path.clone(),
                value: *v,
            }),
        },
    ))
}

#[derive(Debug, Clone)]
pub struct OmWitness {
    pub traitor: NodeId,
    pub commander_value: OmValue,
    pub table: BTreeMap<(NodeId, Vec<NodeId>), Option<OmValue>>,
    pub decisions: BTreeMap<NodeId, OmValue>,
}

#[derive(Debug, Clone, Default)]
pub struct OmSearchReport {
    pub strategies: u64,
    pub violations: Vec<OmWitness>,
}

/// Tries every single-traitor strategy that picks each of the traitor's
/// outbound values from `domain` (plus withholding if `with_silence`), for
/// every traitor position and loyal commander value in `domain`.
///
/// Relays are keyed by path and a lieutenant relays the same paths
/// whatever values it receives, so a static table covers every strategy
/// in the substitution family.
pub fn om_exhaustive(
    model: &NetworkModel,
    n: usize,
    f: usize,
    domain: &[OmValue],
    with_silence: bool,
    seed: u64,
) -> Result<OmSearchReport, OmError> {
    let mut choices: Vec<Option<OmValue>> = domain.iter().copied().map(Some).collect();
    if with_silence {
        choices.push(None);
    }
    let mut report = OmSearchReport::default();
    for traitor in 0..n {
        let commander_values: &[OmValue] = if traitor == 0 { &domain[..1] } else { domain };
        for &cv in commander_values {
            let slots = traitor_sends(n, f, traitor);
            let combos = (choices.len() as u64).pow(slots.len() as u32);
            for code in 0..combos {
                let mut rest = code;
                let mut table = BTreeMap::new();
                for slot in &slots {
                    table.insert(
                        slot.clone(),
                        choices[(rest % choices.len() as u64) as usize],
                    );
                    rest /= choices.len() as u64;
                }
                let adv = AdversarySpec::honest().with(traitor, table_traitor(table.clone()));
                let out = om_run(model, n, f, cv, adv, seed)?;
                report.strategies += 1;
                if !out.loyal_decisions_agree() {
                    report.violations.push(OmWitness {
                        traitor,
                        commander_value: cv,
                        table,
                        decisions: out.decisions,
                    });
                }
            }
        }
    }
    Ok(report)
}

/// `(recipient, path)` of every message `node` sends in an OM(f) run with
/// node 0 as commander.
fn traitor_sends(n: usize, f: usize, node: NodeId) -> Vec<(NodeId, Vec<NodeId>)> {
    fn walk(
        n: usize,
        f: usize,
        node: NodeId,
        path: &mut Vec<NodeId>,
        out: &mut Vec<(NodeId, Vec<NodeId>)>,
    ) {
        let last = *path.last().unwrap();
        let targets: Vec<NodeId> = (0..n).filter(|j| !path.contains(j)).collect();
        for to in targets {
            if last == node {
                out.push((to, path.clone()));
            }
            if path.len() <= f {
                path.push(to);
                walk(n, f, node, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(n, f, node, &mut vec![0], &mut out);
    out.sort();
    out
}

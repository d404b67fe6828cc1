//! Deterministic discrete-event message-passing network.
//!
//! Nodes are state machines driven by three kinds of events: start, message
//! delivery and timer expiry. Each callback gets a [`Context`] to queue
//! sends, timers and trace marks; the simulator applies the adversary to
//! corrupted senders, samples link delays and schedules deliveries. Events
//! pop in `(time, id)` order, ids being allocated from one counter, so a
//! run is a pure function of its nodes, adversary, model and seed.

mod adversary;
mod model;
mod trace;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use thiserror::Error;

pub use adversary::{AdversarySpec, Behavior, EquivocationStrategy, Substitution, Transformed};
pub use model::{NetworkModel, SharedMedium, SynchronyModel};
pub use trace::{Trace, TraceKind, TraceLevel, TraceRecord};

use crate::crypto::hash;
use crate::rng::{indexed_substream, substream, SimRng};

pub type NodeId = usize;
/// Simulated milliseconds.
pub type SimTime = u64;

pub const DEFAULT_EVENT_BUDGET: u64 = 50_000_000;

/// A protocol message. `tag` is the one-byte wire type; `encode` is the
/// canonical payload used for trace hashes and size accounting.
pub trait Message: Clone {
    fn tag(&self) -> u8;
    fn kind(&self) -> &'static str;
    fn encode(&self) -> Vec<u8>;
    fn wire_len(&self) -> usize {
        self.encode().len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dest {
    To(NodeId),
    /// Every other node in the simulation.
    Broadcast,
    /// Listed nodes, skipping the sender.
    Group(Vec<NodeId>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope<M> {
    pub msg_id: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub payload: M,
    pub sent_at: SimTime,
    pub deliver_at: SimTime,
}

pub trait Node {
    type Msg: Message;

    fn on_start(&mut self, _ctx: &mut Context<'_, Self::Msg>) {}
    fn on_message(&mut self, ctx: &mut Context<'_, Self::Msg>, from: NodeId, msg: Self::Msg);
    fn on_timer(&mut self, _ctx: &mut Context<'_, Self::Msg>, _timer: u64) {}
    /// Called when a crashed node restarts.
    fn on_recover(&mut self, _ctx: &mut Context<'_, Self::Msg>) {}
    fn snapshot(&self) -> Option<String> {
        None
    }
}

/// Side-effect collector handed to node callbacks.
pub struct Context<'a, M> {
    now: SimTime,
    me: NodeId,
    node_count: usize,
    rng: &'a mut SimRng,
    out: Vec<(Dest, M)>,
    timers: Vec<(u64, u64)>,
    marks: Vec<(String, String)>,
    halt: Option<String>,
}

impl<'a, M> Context<'a, M> {
    /// A context outside any simulation, for driving single transitions.
    pub fn detached(now: SimTime, me: NodeId, node_count: usize, rng: &'a mut SimRng) -> Self {
        Self {
            now,
            me,
            node_count,
            rng,
            out: Vec::new(),
            timers: Vec::new(),
            marks: Vec::new(),
            halt: None,
        }
    }

    /// Queued sends, in order.
    pub fn into_outbound(self) -> Vec<(Dest, M)> {
        self.out
    }

    /// Queued `(delay, timer)` pairs.
    pub fn pending_timers(&self) -> &[(u64, u64)] {
        &self.timers
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn me(&self) -> NodeId {
        self.me
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn rng(&mut self) -> &mut SimRng {
        self.rng
    }

    pub fn send(&mut self, to: NodeId, msg: M) {
        self.out.push((Dest::To(to), msg));
    }

    pub fn broadcast(&mut self, msg: M) {
        self.out.push((Dest::Broadcast, msg));
    }

    pub fn multicast(&mut self, group: &[NodeId], msg: M) {
        self.out.push((Dest::Group(group.to_vec()), msg));
    }

    pub fn set_timer(&mut self, delay: u64, timer: u64) {
        self.timers.push((delay, timer));
    }

    /// Records a labelled trace event, e.g. a protocol phase marker.
    pub fn mark(&mut self, label: &str, detail: impl Into<String>) {
        self.marks.push((label.to_string(), detail.into()));
    }

    /// Stops the run after this callback, e.g. on a detected safety breach.
    pub fn halt(&mut self, reason: impl Into<String>) {
        self.halt = Some(reason.into());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("event budget of {budget} exhausted at t={time}ms; trace truncated")]
    Truncated { budget: u64, time: SimTime },
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    pub events: u64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub sent_by_kind: BTreeMap<&'static str, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Halt {
    pub node: NodeId,
    pub time: SimTime,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub end_time: SimTime,
    pub halted: Option<Halt>,
    pub quiescent: bool,
}

enum EventKind<M> {
    Start(NodeId),
    Deliver(Envelope<M>),
    Timer {
        node: NodeId,
        timer: u64,
        incarnation: u32,
    },
    Crash(NodeId),
    Recover(NodeId),
}

struct Scheduled<M> {
    at: SimTime,
    id: u64,
    kind: EventKind<M>,
}

impl<M> PartialEq for Scheduled<M> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.id) == (other.at, other.id)
    }
}
impl<M> Eq for Scheduled<M> {}
impl<M> PartialOrd for Scheduled<M> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<M> Ord for Scheduled<M> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.id).cmp(&(other.at, other.id))
    }
}

pub struct Simulation<N: Node> {
    nodes: Vec<N>,
    model: NetworkModel,
    adversary: AdversarySpec<N::Msg>,
    queue: BinaryHeap<Reverse<Scheduled<N::Msg>>>,
    next_id: u64,
    net_rng: SimRng,
    adv_rng: SimRng,
    node_rngs: Vec<SimRng>,
    down: Vec<bool>,
    incarnation: Vec<u32>,
    medium_free_at: f64,
    now: SimTime,
    last_popped: (SimTime, u64),
    trace: Trace,
    level: TraceLevel,
    stats: RunStats,
    budget: u64,
    started: bool,
}

impl<N: Node> Simulation<N> {
    pub fn new(
        nodes: Vec<N>,
        model: NetworkModel,
        adversary: AdversarySpec<N::Msg>,
        seed: u64,
    ) -> Self {
        let node_rngs = (0..nodes.len() as u64)
            .map(|i| indexed_substream(seed, "node", i))
            .collect();
        let n = nodes.len();
        Self {
            nodes,
            model,
            adversary,
            queue: BinaryHeap::new(),
            next_id: 0,
            net_rng: substream(seed, "network"),
            adv_rng: substream(seed, "adversary"),
            node_rngs,
            down: vec![false; n],
            incarnation: vec![0; n],
            medium_free_at: 0.0,
            now: 0,
            last_popped: (0, 0),
            trace: Trace::default(),
            level: TraceLevel::Full,
            stats: RunStats::default(),
            budget: DEFAULT_EVENT_BUDGET,
            started: false,
        }
    }

    pub fn with_trace_level(mut self, level: TraceLevel) -> Self {
        self.level = level;
        self
    }

    pub fn with_event_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    pub fn nodes(&self) -> &[N] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &N {
        &self.nodes[id]
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn into_parts(self) -> (Vec<N>, Trace) {
        (self.nodes, self.trace)
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn is_down(&self, id: NodeId) -> bool {
        self.down[id]
    }

    fn alloc_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn push(&mut self, at: SimTime, kind: EventKind<N::Msg>) {
        let id = self.alloc_id();
        self.queue.push(Reverse(Scheduled { at, id, kind }));
    }

    fn record(&mut self, rec: TraceRecord) {
        let keep = match self.level {
            TraceLevel::Full => true,
            TraceLevel::MarksOnly => {
                matches!(
                    rec.kind,
                    TraceKind::Mark | TraceKind::Crash | TraceKind::Recover | TraceKind::Snapshot
                )
            }
        };
        if keep {
            self.trace.records.push(rec);
        }
    }

    fn new_record(&self, kind: TraceKind) -> TraceRecord {
        TraceRecord::new(self.trace.records.len() as u64, self.now, kind)
    }

    fn schedule_start(&mut self) {
        if self.started {
            return;
        }
        self.started = true;
        for n in 0..self.nodes.len() {
            self.push(0, EventKind::Start(n));
        }
        for (node, at, recover_at) in self.adversary.crash_schedule() {
            self.push(at, EventKind::Crash(node));
            if let Some(r) = recover_at {
                self.push(r.max(at), EventKind::Recover(node));
            }
        }
    }

    /// Runs until the queue drains, `until` passes, a node halts, or the
    /// event budget runs out.
    pub fn run(&mut self, until: Option<SimTime>) -> Result<RunOutcome, SimError> {
        self.model.synchrony.validate().map_err(SimError::Config)?;
        self.schedule_start();
        loop {
            let Some(Reverse(top)) = self.queue.peek() else {
                return Ok(RunOutcome {
                    end_time: self.now,
                    halted: None,
                    quiescent: true,
                });
            };
            if until.is_some_and(|u| top.at > u) {
                self.now = until.unwrap();
                return Ok(RunOutcome {
                    end_time: self.now,
                    halted: None,
                    quiescent: false,
                });
            }
            if self.stats.events >= self.budget {
                return Err(SimError::Truncated {
                    budget: self.budget,
                    time: self.now,
                });
            }
            let Reverse(ev) = self.queue.pop().unwrap();
            debug_assert!((ev.at, ev.id) > self.last_popped || self.stats.events == 0);
            self.last_popped = (ev.at, ev.id);
            self.now = ev.at;
            self.stats.events += 1;
            if let Some(h) = self.dispatch(ev.kind) {
                return Ok(RunOutcome {
                    end_time: self.now,
                    halted: Some(h),
                    quiescent: false,
                });
            }
        }
    }

    /// Appends a snapshot record for every node that provides one.
    pub fn snapshot_all(&mut self) {
        for id in 0..self.nodes.len() {
            if let Some(s) = self.nodes[id].snapshot() {
                let mut rec = self.new_record(TraceKind::Snapshot);
                rec.node = Some(id);
                rec.detail = Some(s);
                self.record(rec);
            }
        }
    }

    fn dispatch(&mut self, kind: EventKind<N::Msg>) -> Option<Halt> {
        match kind {
            EventKind::Start(n) => self.invoke(n, |node, ctx| node.on_start(ctx)),
            EventKind::Timer {
                node,
                timer,
                incarnation,
            } => {
                if self.down[node] || incarnation != self.incarnation[node] {
                    return None;
                }
                if self.level == TraceLevel::Full {
                    let mut rec = self.new_record(TraceKind::Timer);
                    rec.node = Some(node);
                    rec.detail = Some(timer.to_string());
                    self.record(rec);
                }
                self.invoke(node, |n, ctx| n.on_timer(ctx, timer))
            }
            EventKind::Deliver(env) => {
                let to = env.to;
                if self.down[to] {
                    self.stats.dropped += 1;
                    let mut rec = self.new_record(TraceKind::Drop);
                    rec.from = Some(env.from);
                    rec.to = Some(to);
                    rec.msg_id = Some(env.msg_id);
                    rec.label = Some("receiver-down".into());
                    self.record(rec);
                    return None;
                }
                self.stats.delivered += 1;
                if self.level == TraceLevel::Full {
                    let mut rec = self.new_record(TraceKind::Deliver);
                    rec.from = Some(env.from);
                    rec.to = Some(to);
                    rec.msg_id = Some(env.msg_id);
                    rec.tag = Some(env.payload.tag());
                    self.record(rec);
                }
                let from = env.from;
                self.invoke(to, move |n, ctx| n.on_message(ctx, from, env.payload))
            }
            EventKind::Crash(n) => {
                self.down[n] = true;
                self.incarnation[n] += 1;
                let mut rec = self.new_record(TraceKind::Crash);
                rec.node = Some(n);
                self.record(rec);
                None
            }
            EventKind::Recover(n) => {
                self.down[n] = false;
                let mut rec = self.new_record(TraceKind::Recover);
                rec.node = Some(n);
                self.record(rec);
                self.invoke(n, |node, ctx| node.on_recover(ctx))
            }
        }
    }

    fn invoke<F>(&mut self, id: NodeId, f: F) -> Option<Halt>
    where
        F: FnOnce(&mut N, &mut Context<'_, N::Msg>),
    {
        let node_count = self.nodes.len();
        let mut ctx = Context {
            now: self.now,
            me: id,
            node_count,
            rng: &mut self.node_rngs[id],
            out: Vec::new(),
            timers: Vec::new(),
            marks: Vec::new(),
            halt: None,
        };
        f(&mut self.nodes[id], &mut ctx);
        let Context {
            out,
            timers,
            marks,
            halt,
            ..
        } = ctx;

        for (label, detail) in marks {
            let mut rec = self.new_record(TraceKind::Mark);
            rec.node = Some(id);
            rec.label = Some(label);
            rec.detail = Some(detail);
            self.record(rec);
        }
        for (delay, timer) in timers {
            let incarnation = self.incarnation[id];
            self.push(
                self.now + delay,
                EventKind::Timer {
                    node: id,
                    timer,
                    incarnation,
                },
            );
        }
        self.flush_outbound(id, out);
        halt.map(|reason| {
            let mut rec = self.new_record(TraceKind::Mark);
            rec.node = Some(id);
            rec.label = Some("halt".into());
            rec.detail = Some(reason.clone());
            self.record(rec);
            Halt {
                node: id,
                time: self.now,
                reason,
            }
        })
    }

    fn flush_outbound(&mut self, from: NodeId, out: Vec<(Dest, N::Msg)>) {
        if out.is_empty() {
            return;
        }
        let n = self.nodes.len();
        let mut expanded = Vec::new();
        for (dest, msg) in out {
            match dest {
                Dest::To(to) => {
                    assert!(to < n, "node {from} sent to unknown node {to}");
                    expanded.push((to, msg));
                }
                Dest::Broadcast => {
                    expanded.extend((0..n).filter(|&to| to != from).map(|to| (to, msg.clone())));
                }
                Dest::Group(group) => {
                    for to in group.into_iter().filter(|&to| to != from) {
                        assert!(to < n, "node {from} sent to unknown node {to}");
                        expanded.push((to, msg.clone()));
                    }
                }
            }
        }
        let transformed = self
            .adversary
            .transform(from, self.now, expanded, &mut self.adv_rng);
        for t in transformed {
            let propagation = self
                .model
                .synchrony
                .sample_delay(self.now, &mut self.net_rng)
                + t.extra_delay;
            let departed = match &self.model.medium {
                Some(medium) => {
                    let start = self.medium_free_at.max(self.now as f64);
                    self.medium_free_at = start + medium.occupancy_ms(t.msg.wire_len());
                    self.medium_free_at.ceil() as SimTime
                }
                None => self.now,
            };
            let deliver_at = departed + propagation;
            let msg_id = self.alloc_id();
            self.stats.sent += 1;
            *self.stats.sent_by_kind.entry(t.msg.kind()).or_default() += 1;
            if self.level == TraceLevel::Full {
                let mut rec = self.new_record(TraceKind::Send);
                rec.from = Some(from);
                rec.to = Some(t.to);
                rec.msg_id = Some(msg_id);
                rec.tag = Some(t.msg.tag());
                rec.payload_hash = Some(hash(&t.msg.encode()).to_hex());
                rec.deliver_at = Some(deliver_at);
                self.record(rec);
            }
            let env = Envelope {
                msg_id,
                from,
                to: t.to,
                payload: t.msg,
                sent_at: self.now,
                deliver_at,
            };
            self.queue.push(Reverse(Scheduled {
                at: deliver_at,
                id: msg_id,
                kind: EventKind::Deliver(env),
            }));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Ping(u64);

    impl Message for Ping {
        fn tag(&self) -> u8 {
            1
        }
        fn kind(&self) -> &'static str {
            "ping"
        }
        fn encode(&self) -> Vec<u8> {
            self.0.to_be_bytes().to_vec()
        }
    }

    /// Node 0 broadcasts; everyone echoes back to node 0 once.
    #[derive(Default)]
    struct Echo {
        seen: Vec<(SimTime, NodeId, u64)>,
    }

    impl Node for Echo {
        type Msg = Ping;
        fn on_start(&mut self, ctx: &mut Context<'_, Ping>) {
            if ctx.me() == 0 {
                ctx.broadcast(Ping(7));
                ctx.set_timer(1_000, 1);
            }
        }
        fn on_message(&mut self, ctx: &mut Context<'_, Ping>, from: NodeId, msg: Ping) {
            self.seen.push((ctx.now(), from, msg.0));
            if ctx.me() != 0 {
                ctx.send(0, Ping(msg.0 + ctx.me() as u64));
            }
        }
        fn on_timer(&mut self, ctx: &mut Context<'_, Ping>, _timer: u64) {
            ctx.mark("done", format!("{}", self.seen.len()));
        }
    }

    fn sim(n: usize, seed: u64) -> Simulation<Echo> {
        let nodes = (0..n).map(|_| Echo::default()).collect();
        let model = NetworkModel::new(SynchronyModel::Synchronous {
            min_ms: 1,
            delta_ms: 100,
        });
        Simulation::new(nodes, model, AdversarySpec::honest(), seed)
    }

    #[test]
    fn zero_nodes_gives_empty_trace() {
        let mut s = sim(0, 1);
        let out = s.run(None).unwrap();
        assert!(out.quiescent);
        assert!(s.trace().is_empty());
    }

    #[test]
    fn same_seed_same_trace() {
        let digest = |seed| {
            let mut s = sim(5, seed);
            s.run(None).unwrap();
            s.trace().digest()
        };
        assert_eq!(digest(3), digest(3));
        assert_ne!(digest(3), digest(4));
    }

    #[test]
    fn deliveries_respect_causality_and_order() {
        let mut s = sim(6, 9);
        s.run(None).unwrap();
        let sends: BTreeMap<u64, (SimTime, SimTime)> = s
            .trace()
            .records
            .iter()
            .filter(|r| r.kind == TraceKind::Send)
            .map(|r| (r.msg_id.unwrap(), (r.time, r.deliver_at.unwrap())))
            .collect();
        let mut last = (0, 0);
        for r in s
            .trace()
            .records
            .iter()
            .filter(|r| r.kind == TraceKind::Deliver)
        {
            let (sent, due) = sends[&r.msg_id.unwrap()];
            assert!(sent <= r.time && r.time == due);
            assert!((r.time, r.msg_id.unwrap()) >= last);
            last = (r.time, r.msg_id.unwrap());
        }
        assert_eq!(s.node(0).seen.len(), 5);
        assert_eq!(s.stats().sent_by_kind["ping"], 10);
    }

    #[test]
    fn crashed_receiver_drops_and_crashed_sender_is_silent() {
        let nodes = (0..3).map(|_| Echo::default()).collect();
        let adv = AdversarySpec::honest().with(
            2,
            Behavior::Crash {
                at: 0,
                recover_at: None,
            },
        );
        let mut s = Simulation::new(nodes, NetworkModel::new(SynchronyModel::fixed(10)), adv, 1);
        s.run(None).unwrap();
        assert_eq!(s.node(0).seen.len(), 1);
        assert_eq!(s.stats().dropped, 1);
    }

    #[test]
    fn shared_medium_serialises_transmissions() {
        let nodes = (0..5).map(|_| Echo::default()).collect();
        let model = NetworkModel::new(SynchronyModel::fixed(10)).with_medium(SharedMedium {
            per_message_ms: 5.0,
            bytes_per_ms: None,
        });
        let mut s = Simulation::new(nodes, model, AdversarySpec::honest(), 1);
        s.run(None).unwrap();
        let deliver: Vec<SimTime> = s
            .trace()
            .records
            .iter()
            .filter(|r| r.kind == TraceKind::Send)
            .take(4)
            .map(|r| r.deliver_at.unwrap())
            .collect();
        assert_eq!(deliver, vec![15, 20, 25, 30]);
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let mut s = sim(5, 1).with_event_budget(3);
        assert!(matches!(
            s.run(None),
            Err(SimError::Truncated { budget: 3, .. })
        ));
        assert!(!s.trace().is_empty());
    }

    #[test]
    fn stop_time_leaves_later_events_queued() {
        let mut s = sim(3, 1);
        let out = s.run(Some(0)).unwrap();
        assert!(!out.quiescent);
        assert!(s.node(0).seen.is_empty());
        s.run(None).unwrap();
        assert_eq!(s.node(0).seen.len(), 2);
    }
}

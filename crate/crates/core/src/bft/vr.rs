//! Viewstamped Replication: normal operation, view change and recovery.
//!
//! Replicas are nodes `0..n`, clients follow. The primary of view `v` is
//! replica `v mod n`. Commit numbers ride on later Prepares; there are no
//! standalone Commit messages, so backups execute one operation behind the
//! primary in a quiet system.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::Serialize;

use crate::codec::Writer;
use crate::crypto::{hash_parts, Digest256};
use crate::netsim::{
    AdversarySpec, Behavior, Context, Message, NetworkModel, Node, NodeId, SimError, SimTime,
    Simulation, Trace,
};

const VIEW_CHANGE_TIMER: u64 = 1 << 32;
const RECOVERY_TIMER: u64 = 2 << 32;
const RETRY_TIMER: u64 = 3 << 32;
const NEXT_TIMER: u64 = 4 << 32;
const GEN_MASK: u64 = (1 << 32) - 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Op {
    pub client: NodeId,
    pub request_no: u64,
    pub payload: Vec<u8>,
}

impl Op {
    fn encode_into(&self, w: &mut Writer) {
        w.u64(self.client as u64)
            .u64(self.request_no)
            .bytes(&self.payload);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VrMessage {
    Request(Op),
    Prepare {
        view: u64,
        op_no: u64,
        op: Op,
        commit_no: u64,
    },
    PrepareOk {
        view: u64,
        op_no: u64,
        replica: NodeId,
    },
    Reply {
        view: u64,
        request_no: u64,
        result: Digest256,
    },
    StartViewChange {
        view: u64,
        replica: NodeId,
    },
    DoViewChange {
        view: u64,
        log: Vec<Op>,
        last_normal: u64,
        commit_no: u64,
        replica: NodeId,
    },
    StartView {
        view: u64,
        log: Vec<Op>,
        commit_no: u64,
    },
    Recovery {
        replica: NodeId,
        nonce: u64,
    },
    RecoveryResponse {
        view: u64,
        nonce: u64,
        log: Option<Vec<Op>>,
        commit_no: u64,
        replica: NodeId,
    },
}

fn encode_log(w: &mut Writer, log: &[Op]) {
    w.u32(log.len() as u32);
    for op in log {
        op.encode_into(w);
    }
}

impl Message for VrMessage {
    fn tag(&self) -> u8 {
        match self {
            VrMessage::Request(_) => 0x30,
            VrMessage::Prepare { .. } => 0x31,
            VrMessage::PrepareOk { .. } => 0x32,
            VrMessage::Reply { .. } => 0x33,
            VrMessage::StartViewChange { .. } => 0x34,
            VrMessage::DoViewChange { .. } => 0x35,
            VrMessage::StartView { .. } => 0x36,
            VrMessage::Recovery { .. } => 0x37,
            VrMessage::RecoveryResponse { .. } => 0x38,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            VrMessage::Request(_) => "request",
            VrMessage::Prepare { .. } => "prepare",
            VrMessage::PrepareOk { .. } => "prepare_ok",
            VrMessage::Reply { .. } => "reply",
            VrMessage::StartViewChange { .. } => "start_view_change",
            VrMessage::DoViewChange { .. } => "do_view_change",
            VrMessage::StartView { .. } => "start_view",
            VrMessage::Recovery { .. } => "recovery",
            VrMessage::RecoveryResponse { .. } => "recovery_response",
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.tag());
        match self {
            VrMessage::Request(op) => op.encode_into(&mut w),
            VrMessage::Prepare {
                view,
                op_no,
                op,
                commit_no,
            } => {
                w.u64(*view).u64(*op_no);
                op.encode_into(&mut w);
                w.u64(*commit_no);
            }
            VrMessage::PrepareOk {
                view,
                op_no,
                replica,
            } => {
                w.u64(*view).u64(*op_no).u64(*replica as u64);
            }
            VrMessage::Reply {
                view,
                request_no,
                result,
            } => {
                w.u64(*view).u64(*request_no).fixed(result.as_bytes());
            }
            VrMessage::StartViewChange { view, replica } => {
                w.u64(*view).u64(*replica as u64);
            }
            VrMessage::DoViewChange {
                view,
                log,
                last_normal,
                commit_no,
                replica,
            } => {
                w.u64(*view);
                encode_log(&mut w, log);
                w.u64(*last_normal).u64(*commit_no).u64(*replica as u64);
            }
            VrMessage::StartView {
                view,
                log,
                commit_no,
            } => {
                w.u64(*view);
                encode_log(&mut w, log);
                w.u64(*commit_no);
            }
            VrMessage::Recovery { replica, nonce } => {
                w.u64(*replica as u64).u64(*nonce);
            }
            VrMessage::RecoveryResponse {
                view,
                nonce,
                log,
                commit_no,
                replica,
            } => {
                w.u64(*view).u64(*nonce);
                match log {
                    Some(l) => {
                        w.u8(1);
                        encode_log(&mut w, l);
                    }
                    None => {
                        w.u8(0);
                    }
                }
                w.u64(*commit_no).u64(*replica as u64);
            }
        }
        w.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VrStatus {
    Normal,
    ViewChange,
    Recovering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VrTimeouts {
    pub view_change_ms: u64,
    pub recovery_retry_ms: u64,
}

impl VrTimeouts {
    /// View-change timer of four mean link delays.
    pub fn for_model(model: &NetworkModel) -> Self {
        let mean = model.synchrony.mean_delay_ms().max(1.0);
        Self {
            view_change_ms: (4.0 * mean).ceil() as u64,
            recovery_retry_ms: (4.0 * mean).ceil() as u64,
        }
    }
}

#[derive(Debug, Clone)]
struct DvcRecord {
    log: Vec<Op>,
    last_normal: u64,
    commit_no: u64,
}

#[derive(Debug, Clone)]
struct RecoveryRecord {
    view: u64,
    log: Option<Vec<Op>>,
    commit_no: u64,
}

#[derive(Debug, Clone)]
pub struct VrReplica {
    id: NodeId,
    n: usize,
    f: usize,
    timeouts: VrTimeouts,
    view: u64,
    status: VrStatus,
    log: Vec<Op>,
    commit_no: u64,
    executed: Vec<Op>,
    state: Digest256,
    last_normal: u64,
    acked: BTreeMap<NodeId, u64>,
    svc: BTreeMap<u64, BTreeSet<NodeId>>,
    dvc: BTreeMap<u64, BTreeMap<NodeId, DvcRecord>>,
    sent_dvc: Option<u64>,
    client_table: BTreeMap<NodeId, (u64, Digest256)>,
    pending_prepares: BTreeMap<(u64, u64), (Op, u64)>,
    awaiting: BTreeMap<(NodeId, u64), Op>,
    timer_gen: u64,
    timer_armed: bool,
    recovery: Option<(u64, BTreeMap<NodeId, RecoveryRecord>)>,
    recoveries: u64,
    pub dropped_stale: u64,
    pub view_changes: u64,
}

impl VrReplica {
    pub fn new(id: NodeId, n: usize, timeouts: VrTimeouts) -> Self {
        Self {
            id,
            n,
            f: (n - 1) / 2,
            timeouts,
            view: 0,
            status: VrStatus::Normal,
            log: Vec::new(),
            commit_no: 0,
            executed: Vec::new(),
            state: Digest256::ZERO,
            last_normal: 0,
            acked: BTreeMap::new(),
            svc: BTreeMap::new(),
            dvc: BTreeMap::new(),
            sent_dvc: None,
            client_table: BTreeMap::new(),
            pending_prepares: BTreeMap::new(),
            awaiting: BTreeMap::new(),
            timer_gen: 0,
            timer_armed: false,
            recovery: None,
            recoveries: 0,
            dropped_stale: 0,
            view_changes: 0,
        }
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn status(&self) -> VrStatus {
        self.status
    }

    pub fn log(&self) -> &[Op] {
        &self.log
    }

    pub fn commit_no(&self) -> u64 {
        self.commit_no
    }

    pub fn executed(&self) -> &[Op] {
        &self.executed
    }

    pub fn recoveries(&self) -> u64 {
        self.recoveries
    }

    fn primary_of(&self, view: u64) -> NodeId {
        (view % self.n as u64) as NodeId
    }

    fn is_primary(&self) -> bool {
        self.primary_of(self.view) == self.id
    }

    fn replicas(&self) -> Vec<NodeId> {
        (0..self.n).collect()
    }

    fn arm_timer(&mut self, ctx: &mut Context<'_, VrMessage>) {
        self.timer_gen += 1;
        self.timer_armed = true;
        ctx.set_timer(
            self.timeouts.view_change_ms,
            VIEW_CHANGE_TIMER | (self.timer_gen & GEN_MASK),
        );
    }

    fn disarm_timer(&mut self) {
        self.timer_gen += 1;
        self.timer_armed = false;
    }

    fn execute_to(&mut self, commit_no: u64, ctx: &mut Context<'_, VrMessage>) {
        let target = commit_no.min(self.log.len() as u64);
        if target > self.commit_no {
            self.commit_no = target;
        }
        while (self.executed.len() as u64) < self.commit_no {
            let op = self.log[self.executed.len()].clone();
            self.state = hash_parts(&[
                self.state.as_bytes(),
                &op.client.to_be_bytes(),
                &op.request_no.to_be_bytes(),
                &op.payload,
            ]);
            self.client_table
                .insert(op.client, (op.request_no, self.state));
            self.awaiting.remove(&(op.client, op.request_no));
            if self.is_primary() && self.status == VrStatus::Normal {
                ctx.send(
                    op.client,
                    VrMessage::Reply {
                        view: self.view,
                        request_no: op.request_no,
                        result: self.state,
                    },
                );
            }
            ctx.mark("execute", format!("{}:{}", op.client, op.request_no));
            self.executed.push(op);
        }
    }

    fn on_request(&mut self, ctx: &mut Context<'_, VrMessage>, op: Op) {
        if self.status != VrStatus::Normal {
            self.awaiting.insert((op.client, op.request_no), op);
            return;
        }
        if let Some(&(rn, result)) = self.client_table.get(&op.client) {
            if op.request_no < rn {
                return;
            }
            if op.request_no == rn {
                if self.is_primary() {
                    ctx.send(
                        op.client,
                        VrMessage::Reply {
                            view: self.view,
                            request_no: rn,
                            result,
                        },
                    );
                }
                return;
            }
        }
        if self.is_primary() {
            match self
                .log
                .iter()
                .position(|o| o.client == op.client && o.request_no == op.request_no)
            {
                // Retry of an uncommitted op: re-announce it.
                Some(i) => ctx.multicast(
                    &self.replicas(),
                    VrMessage::Prepare {
                        view: self.view,
                        op_no: i as u64 + 1,
                        op,
                        commit_no: self.commit_no,
                    },
                ),
                None => self.propose(ctx, op),
            }
        } else {
            self.awaiting.insert((op.client, op.request_no), op);
            if !self.timer_armed {
                self.arm_timer(ctx);
            }
        }
    }

    fn propose(&mut self, ctx: &mut Context<'_, VrMessage>, op: Op) {
        self.log.push(op.clone());
        let op_no = self.log.len() as u64;
        ctx.multicast(
            &self.replicas(),
            VrMessage::Prepare {
                view: self.view,
                op_no,
                op,
                commit_no: self.commit_no,
            },
        );
        self.try_commit(ctx);
    }

    fn try_commit(&mut self, ctx: &mut Context<'_, VrMessage>) {
        let mut target = self.commit_no;
        while target < self.log.len() as u64 {
            let next = target + 1;
            let oks = self
                .acked
                .iter()
                .filter(|(r, n)| **r != self.id && **n >= next)
                .count();
            if oks < self.f {
                break;
            }
            target = next;
        }
        self.execute_to(target, ctx);
    }

    fn on_prepare(
        &mut self,
        ctx: &mut Context<'_, VrMessage>,
        view: u64,
        op_no: u64,
        op: Op,
        commit_no: u64,
    ) {
        if view < self.view {
            self.dropped_stale += 1;
            return;
        }
        self.pending_prepares.insert((view, op_no), (op, commit_no));
        self.drain_prepares(ctx);
    }

    fn drain_prepares(&mut self, ctx: &mut Context<'_, VrMessage>) {
        if self.status != VrStatus::Normal || self.is_primary() {
            return;
        }
        let view = self.view;
        self.pending_prepares.retain(|(v, _), _| *v >= view);
        let mut max_commit = 0;
        let mut acked = None;
        while let Some((&(v, op_no), _)) = self.pending_prepares.iter().next() {
            if v != view {
                break;
            }
            let len = self.log.len() as u64;
            if op_no > len + 1 {
                break;
            }
            let (op, commit) = self.pending_prepares.remove(&(v, op_no)).unwrap();
            self.awaiting.remove(&(op.client, op.request_no));
            if op_no == len + 1 {
                self.log.push(op);
            }
            max_commit = max_commit.max(commit);
            acked = Some(op_no.max(acked.unwrap_or(0)));
        }
        if let Some(op_no) = acked {
            let primary = self.primary_of(view);
            ctx.send(
                primary,
                VrMessage::PrepareOk {
                    view,
                    op_no: op_no.min(self.log.len() as u64),
                    replica: self.id,
                },
            );
            if self.awaiting.is_empty() {
                self.disarm_timer();
            }
        }
        self.execute_to(max_commit, ctx);
    }

    fn on_prepare_ok(
        &mut self,
        ctx: &mut Context<'_, VrMessage>,
        view: u64,
        op_no: u64,
        replica: NodeId,
    ) {
        if view < self.view {
            self.dropped_stale += 1;
            return;
        }
        if view != self.view || !self.is_primary() || self.status != VrStatus::Normal {
            return;
        }
        let e = self.acked.entry(replica).or_default();
        *e = (*e).max(op_no);
        self.try_commit(ctx);
    }

    fn start_view_change(&mut self, ctx: &mut Context<'_, VrMessage>, view: u64) {
        self.view = view;
        self.status = VrStatus::ViewChange;
        self.acked.clear();
        self.view_changes += 1;
        ctx.mark("view_change", view.to_string());
        ctx.multicast(
            &self.replicas(),
            VrMessage::StartViewChange {
                view,
                replica: self.id,
            },
        );
        self.arm_timer(ctx);
        self.check_svc_quorum(ctx);
    }

    fn check_svc_quorum(&mut self, ctx: &mut Context<'_, VrMessage>) {
        let view = self.view;
        if self.status != VrStatus::ViewChange || self.sent_dvc == Some(view) {
            return;
        }
        let votes = self
            .svc
            .get(&view)
            .map_or(0, |s| s.iter().filter(|r| **r != self.id).count());
        if votes < self.f {
            return;
        }
        self.sent_dvc = Some(view);
        let primary = self.primary_of(view);
        let record = DvcRecord {
            log: self.log.clone(),
            last_normal: self.last_normal,
            commit_no: self.commit_no,
        };
        if primary == self.id {
            self.dvc.entry(view).or_default().insert(self.id, record);
            self.check_dvc_quorum(ctx);
        } else {
            ctx.send(
                primary,
                VrMessage::DoViewChange {
                    view,
                    log: record.log,
                    last_normal: record.last_normal,
                    commit_no: record.commit_no,
                    replica: self.id,
                },
            );
        }
    }

    fn on_start_view_change(
        &mut self,
        ctx: &mut Context<'_, VrMessage>,
        view: u64,
        replica: NodeId,
    ) {
        if view < self.view || self.status == VrStatus::Recovering {
            self.dropped_stale += 1;
            return;
        }
        self.svc.entry(view).or_default().insert(replica);
        if view > self.view {
            self.start_view_change(ctx, view);
        } else {
            self.check_svc_quorum(ctx);
        }
    }

    fn on_do_view_change(
        &mut self,
        ctx: &mut Context<'_, VrMessage>,
        view: u64,
        from: NodeId,
        rec: DvcRecord,
    ) {
        if view < self.view || self.status == VrStatus::Recovering {
            self.dropped_stale += 1;
            return;
        }
        self.dvc.entry(view).or_default().insert(from, rec);
        if view > self.view {
            self.start_view_change(ctx, view);
        }
        self.check_dvc_quorum(ctx);
    }

    fn check_dvc_quorum(&mut self, ctx: &mut Context<'_, VrMessage>) {
        let view = self.view;
        if self.status != VrStatus::ViewChange || self.primary_of(view) != self.id {
            return;
        }
        let Some(records) = self.dvc.get(&view) else {
            return;
        };
        if records.len() < self.f + 1 || !records.contains_key(&self.id) {
            return;
        }
        let best = records
            .values()
            .max_by_key(|r| (r.last_normal, r.log.len()))
            .unwrap()
            .clone();
        let commit = records.values().map(|r| r.commit_no).max().unwrap();
        self.log = best.log;
        self.status = VrStatus::Normal;
        self.last_normal = view;
        self.acked.clear();
        self.disarm_timer();
        ctx.mark("start_view", view.to_string());
        ctx.multicast(
            &self.replicas(),
            VrMessage::StartView {
                view,
                log: self.log.clone(),
                commit_no: commit,
            },
        );
        self.execute_to(commit, ctx);
        self.process_awaiting(ctx);
    }

    fn process_awaiting(&mut self, ctx: &mut Context<'_, VrMessage>) {
        let waiting: Vec<Op> = std::mem::take(&mut self.awaiting).into_values().collect();
        for op in waiting {
            self.on_request(ctx, op);
        }
    }

    fn on_start_view(
        &mut self,
        ctx: &mut Context<'_, VrMessage>,
        view: u64,
        log: Vec<Op>,
        commit_no: u64,
    ) {
        if view < self.view || (view == self.view && self.status == VrStatus::Normal) {
            self.dropped_stale += 1;
            return;
        }
        if self.status == VrStatus::Recovering {
            return;
        }
        self.adopt(ctx, view, log, commit_no);
    }

    fn adopt(&mut self, ctx: &mut Context<'_, VrMessage>, view: u64, log: Vec<Op>, commit_no: u64) {
        debug_assert!(
            self.executed.iter().zip(&log).all(|(a, b)| a == b),
            "adopted log rewrites executed ops"
        );
        self.view = view;
        self.status = VrStatus::Normal;
        self.last_normal = view;
        self.log = log;
        self.acked.clear();
        self.disarm_timer();
        self.execute_to(commit_no, ctx);
        let len = self.log.len() as u64;
        if len > self.commit_no && !self.is_primary() {
            ctx.send(
                self.primary_of(view),
                VrMessage::PrepareOk {
                    view,
                    op_no: len,
                    replica: self.id,
                },
            );
        }
        let logged: BTreeSet<(NodeId, u64)> =
            self.log.iter().map(|o| (o.client, o.request_no)).collect();
        self.awaiting.retain(|k, _| !logged.contains(k));
        if self.is_primary() {
            self.process_awaiting(ctx);
        } else if !self.awaiting.is_empty() {
            self.arm_timer(ctx);
        }
        self.drain_prepares(ctx);
    }

    fn on_timer_fired(&mut self, ctx: &mut Context<'_, VrMessage>, timer: u64) {
        let kind = timer & !GEN_MASK;
        let gen = timer & GEN_MASK;
        match kind {
            VIEW_CHANGE_TIMER if gen == self.timer_gen & GEN_MASK && self.timer_armed => {
                self.timer_armed = false;
                match self.status {
                    VrStatus::Normal if !self.awaiting.is_empty() && !self.is_primary() => {
                        self.start_view_change(ctx, self.view + 1)
                    }
                    VrStatus::ViewChange => self.start_view_change(ctx, self.view + 1),
                    _ => {}
                }
            }
            RECOVERY_TIMER if self.status == VrStatus::Recovering => {
                if let Some((nonce, _)) = &self.recovery {
                    if *nonce & GEN_MASK == gen {
                        self.begin_recovery(ctx);
                    }
                }
            }
            _ => {}
        }
    }

    fn begin_recovery(&mut self, ctx: &mut Context<'_, VrMessage>) {
        let nonce: u64 = ctx.rng().random::<u64>();
        self.recovery = Some((nonce, BTreeMap::new()));
        ctx.multicast(
            &self.replicas(),
            VrMessage::Recovery {
                replica: self.id,
                nonce,
            },
        );
        ctx.set_timer(
            self.timeouts.recovery_retry_ms,
            RECOVERY_TIMER | (nonce & GEN_MASK),
        );
    }

    fn on_recovery_response(
        &mut self,
        ctx: &mut Context<'_, VrMessage>,
        nonce: u64,
        from: NodeId,
        rec: RecoveryRecord,
    ) {
        if self.status != VrStatus::Recovering {
            return;
        }
        let (n, f) = (self.n as u64, self.f);
        let Some((expected, responses)) = &mut self.recovery else {
            return;
        };
        if *expected != nonce {
            self.dropped_stale += 1;
            return;
        }
        responses.insert(from, rec);
        if responses.len() < f + 1 {
            return;
        }
        let view = responses.values().map(|r| r.view).max().unwrap();
        let primary = (view % n) as NodeId;
        let Some(RecoveryRecord {
            view: pv,
            log: Some(log),
            commit_no,
        }) = responses.get(&primary).cloned()
        else {
            return;
        };
        if pv != view {
            return;
        }
        self.recovery = None;
        self.recoveries += 1;
        ctx.mark("recovered", view.to_string());
        self.adopt(ctx, view, log, commit_no);
    }
}

impl Node for VrReplica {
    type Msg = VrMessage;

    fn on_message(&mut self, ctx: &mut Context<'_, VrMessage>, from: NodeId, msg: VrMessage) {
        if self.status == VrStatus::Recovering && !matches!(msg, VrMessage::RecoveryResponse { .. })
        {
            return;
        }
        match msg {
            VrMessage::Request(op) => self.on_request(ctx, op),
            VrMessage::Prepare {
                view,
                op_no,
                op,
                commit_no,
            } => self.on_prepare(ctx, view, op_no, op, commit_no),
            VrMessage::PrepareOk {
                view,
                op_no,
                replica,
            } => self.on_prepare_ok(ctx, view, op_no, replica),
            VrMessage::StartViewChange { view, replica } => {
                self.on_start_view_change(ctx, view, replica)
            }
            VrMessage::DoViewChange {
                view,
                log,
                last_normal,
                commit_no,
                replica,
            } => self.on_do_view_change(
                ctx,
                view,
                replica,
                DvcRecord {
                    log,
                    last_normal,
                    commit_no,
                },
            ),
            VrMessage::StartView {
                view,
                log,
                commit_no,
            } => self.on_start_view(ctx, view, log, commit_no),
            VrMessage::Recovery { replica, nonce } => {
                if self.status == VrStatus::Normal && replica != self.id {
                    let log = self.is_primary().then(|| self.log.clone());
                    ctx.send(
                        from,
                        VrMessage::RecoveryResponse {
                            view: self.view,
                            nonce,
                            log,
                            commit_no: self.commit_no,
                            replica: self.id,
                        },
                    );
                    // The primary itself lost its state; it cannot lead this view.
                    if replica == self.primary_of(self.view) {
                        self.start_view_change(ctx, self.view + 1);
                    }
                }
            }
            VrMessage::RecoveryResponse {
                view,
                nonce,
                log,
                commit_no,
                replica,
            } => self.on_recovery_response(
                ctx,
                nonce,
                replica,
                RecoveryRecord {
                    view,
                    log,
                    commit_no,
                },
            ),
            VrMessage::Reply { .. } => {}
        }
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, VrMessage>, timer: u64) {
        self.on_timer_fired(ctx, timer);
    }

    /// Volatile state is gone after a crash; only identity and
    /// configuration survive.
    fn on_recover(&mut self, ctx: &mut Context<'_, VrMessage>) {
        let recoveries = self.recoveries;
        let (dropped, changes) = (self.dropped_stale, self.view_changes);
        *self = VrReplica::new(self.id, self.n, self.timeouts);
        self.recoveries = recoveries;
        self.dropped_stale = dropped;
        self.view_changes = changes;
        self.status = VrStatus::Recovering;
        self.begin_recovery(ctx);
    }

    fn snapshot(&self) -> Option<String> {
        Some(format!(
            "view={} status={:?} log={} commit={} state={}",
            self.view,
            self.status,
            self.log.len(),
            self.commit_no,
            self.state.short()
        ))
    }
}

/// Sends `total` requests one at a time. Unanswered requests are
/// rebroadcast to every replica after `retry_ms`.
#[derive(Debug, Clone)]
pub struct VrClient {
    id: NodeId,
    n: usize,
    total: u64,
    gap_ms: u64,
    retry_ms: u64,
    next: u64,
    view_guess: u64,
    outstanding: Option<(Op, SimTime)>,
    retry_gen: u64,
    completed: Vec<(u64, Digest256, SimTime)>,
}

impl VrClient {
    pub fn new(id: NodeId, n_replicas: usize, total: u64, gap_ms: u64, retry_ms: u64) -> Self {
        Self {
            id,
            n: n_replicas,
            total,
            gap_ms,
            retry_ms,
            next: 0,
            view_guess: 0,
            outstanding: None,
            retry_gen: 0,
            completed: Vec::new(),
        }
    }

    /// `(request_no, result, latency_ms)` per answered request.
    pub fn completed(&self) -> &[(u64, Digest256, SimTime)] {
        &self.completed
    }

    fn send_next(&mut self, ctx: &mut Context<'_, VrMessage>) {
        self.next += 1;
        let op = Op {
            client: self.id,
            request_no: self.next,
            payload: format!("op-{}-{}", self.id, self.next).into_bytes(),
        };
        let primary = (self.view_guess % self.n as u64) as NodeId;
        ctx.send(primary, VrMessage::Request(op.clone()));
        self.outstanding = Some((op, ctx.now()));
        self.retry_gen += 1;
        ctx.set_timer(self.retry_ms, RETRY_TIMER | (self.retry_gen & GEN_MASK));
    }
}

impl Node for VrClient {
    type Msg = VrMessage;

    fn on_start(&mut self, ctx: &mut Context<'_, VrMessage>) {
        if self.total > 0 {
            self.send_next(ctx);
        }
    }

    fn on_message(&mut self, ctx: &mut Context<'_, VrMessage>, _from: NodeId, msg: VrMessage) {
        let VrMessage::Reply {
            view,
            request_no,
            result,
        } = msg
        else {
            return;
        };
        let Some((op, sent)) = &self.outstanding else {
            return;
        };
        if op.request_no != request_no {
            return;
        }
        self.completed.push((request_no, result, ctx.now() - sent));
        self.outstanding = None;
        self.view_guess = self.view_guess.max(view);
        ctx.mark("reply", request_no.to_string());
        if self.next < self.total {
            if self.gap_ms == 0 {
                self.send_next(ctx);
            } else {
                ctx.set_timer(self.gap_ms, NEXT_TIMER);
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, VrMessage>, timer: u64) {
        if timer == NEXT_TIMER {
            self.send_next(ctx);
        } else if timer & !GEN_MASK == RETRY_TIMER && timer & GEN_MASK == self.retry_gen & GEN_MASK
        {
            if let Some((op, _)) = &self.outstanding {
                let replicas: Vec<NodeId> = (0..self.n).collect();
                ctx.multicast(&replicas, VrMessage::Request(op.clone()));
                self.retry_gen += 1;
                ctx.set_timer(self.retry_ms, RETRY_TIMER | (self.retry_gen & GEN_MASK));
            }
        }
    }
}

/// Replicas and clients share one simulation.
#[derive(Debug, Clone)]
pub enum VrActor {
    Replica(VrReplica),
    Client(VrClient),
}

impl Node for VrActor {
    type Msg = VrMessage;

    fn on_start(&mut self, ctx: &mut Context<'_, VrMessage>) {
        match self {
            VrActor::Replica(r) => r.on_start(ctx),
            VrActor::Client(c) => c.on_start(ctx),
        }
    }

    fn on_message(&mut self, ctx: &mut Context<'_, VrMessage>, from: NodeId, msg: VrMessage) {
        match self {
            VrActor::Replica(r) => r.on_message(ctx, from, msg),
            VrActor::Client(c) => c.on_message(ctx, from, msg),
        }
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, VrMessage>, timer: u64) {
        match self {
            VrActor::Replica(r) => r.on_timer(ctx, timer),
            VrActor::Client(c) => c.on_timer(ctx, timer),
        }
    }

    fn on_recover(&mut self, ctx: &mut Context<'_, VrMessage>) {
        match self {
            VrActor::Replica(r) => r.on_recover(ctx),
            VrActor::Client(c) => c.on_recover(ctx),
        }
    }

    fn snapshot(&self) -> Option<String> {
        match self {
            VrActor::Replica(r) => r.snapshot(),
            VrActor::Client(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VrScenario {
    pub n: usize,
    pub requests: u64,
    pub gap_ms: u64,
    pub model: NetworkModel,
    /// `(replica, crash_at, recover_at)`.
    pub crash: Option<(NodeId, SimTime, Option<SimTime>)>,
    pub timeouts: Option<VrTimeouts>,
    pub client_retry_ms: Option<u64>,
    pub horizon_ms: Option<SimTime>,
}

impl VrScenario {
    pub fn normal(n: usize, requests: u64, model: NetworkModel) -> Self {
        Self {
            n,
            requests,
            gap_ms: 0,
            model,
            crash: None,
            timeouts: None,
            client_retry_ms: None,
            horizon_ms: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VrReport {
    pub replicas: Vec<VrReplica>,
    pub client: VrClient,
    pub crashed_at_end: Vec<NodeId>,
    pub messages: u64,
    pub sent_by_kind: BTreeMap<&'static str, u64>,
    pub end_time: SimTime,
    pub trace: Trace,
}

impl VrReport {
    /// Executed logs of the given replicas are all prefixes of the longest.
    pub fn prefix_consistent(&self) -> bool {
        let logs: Vec<&[Op]> = self
            .replicas
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.crashed_at_end.contains(i))
            .map(|(_, r)| r.executed())
            .collect();
        let Some(longest) = logs.iter().max_by_key(|l| l.len()) else {
            return true;
        };
        logs.iter().all(|l| longest.starts_with(l))
    }

    pub fn view_changes(&self) -> u64 {
        self.replicas.iter().map(|r| r.view).max().unwrap_or(0)
    }
}

pub fn vr_run(scenario: &VrScenario, seed: u64) -> Result<VrReport, SimError> {
    let n = scenario.n;
    if n == 0 {
        return Err(SimError::Config("VR needs at least one replica".into()));
    }
    let timeouts = scenario
        .timeouts
        .unwrap_or_else(|| VrTimeouts::for_model(&scenario.model));
    let retry = scenario
        .client_retry_ms
        .unwrap_or(timeouts.view_change_ms * 3);
    let mut nodes: Vec<VrActor> = (0..n)
        .map(|i| VrActor::Replica(VrReplica::new(i, n, timeouts)))
        .collect();
    nodes.push(VrActor::Client(VrClient::new(
        n,
        n,
        scenario.requests,
        scenario.gap_ms,
        retry,
    )));
    let mut adversary = AdversarySpec::honest();
    if let Some((node, at, recover_at)) = scenario.crash {
        adversary = adversary.with(node, Behavior::Crash { at, recover_at });
    }
    let mut sim = Simulation::new(nodes, scenario.model.clone(), adversary, seed);
    let outcome = sim.run(scenario.horizon_ms)?;
    sim.snapshot_all();
    let crashed_at_end = (0..n).filter(|&i| sim.is_down(i)).collect();
    let stats = sim.stats().clone();
    let mut replicas = Vec::with_capacity(n);
    let mut client = None;
    for node in sim.nodes() {
        match node {
            VrActor::Replica(r) => replicas.push(r.clone()),
            VrActor::Client(c) => client = Some(c.clone()),
        }
    }
    Ok(VrReport {
        replicas,
        client: client.expect("client node"),
        crashed_at_end,
        messages: stats.sent,
        sent_by_kind: stats.sent_by_kind,
        end_time: outcome.end_time,
        trace: sim.into_trace(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::SynchronyModel;

    fn net() -> NetworkModel {
        NetworkModel::new(SynchronyModel::Synchronous {
            min_ms: 2,
            delta_ms: 10,
        })
    }

    fn ctx_run<F: FnOnce(&mut VrReplica, &mut Context<'_, VrMessage>)>(
        r: &mut VrReplica,
        f: F,
    ) -> Vec<VrMessage> {
        // Drive one transition through a throwaway simulation context.
        let mut rng = crate::rng::substream(0, "ctx");
        let mut ctx = Context::detached(0, r.id, r.n + 1, &mut rng);
        f(r, &mut ctx);
        ctx.into_outbound().into_iter().map(|(_, m)| m).collect()
    }

    fn op(n: u64) -> Op {
        Op {
            client: 3,
            request_no: n,
            payload: vec![n as u8],
        }
    }

    #[test]
    fn backup_acks_a_prepare() {
        let mut r = VrReplica::new(
            1,
            3,
            VrTimeouts {
                view_change_ms: 40,
                recovery_retry_ms: 40,
            },
        );
        let out = ctx_run(&mut r, |r, ctx| {
            r.on_message(
                ctx,
                0,
                VrMessage::Prepare {
                    view: 0,
                    op_no: 1,
                    op: op(1),
                    commit_no: 0,
                },
            )
        });
        assert_eq!(
            out,
            vec![VrMessage::PrepareOk {
                view: 0,
                op_no: 1,
                replica: 1
            }]
        );
        assert_eq!(r.log().len(), 1);
    }

    #[test]
    fn primary_executes_after_f_oks() {
        let mut r = VrReplica::new(
            0,
            3,
            VrTimeouts {
                view_change_ms: 40,
                recovery_retry_ms: 40,
            },
        );
        let out = ctx_run(&mut r, |r, ctx| {
            r.on_message(ctx, 3, VrMessage::Request(op(1)))
        });
        assert_eq!(out.len(), 1);
        assert!(r.executed().is_empty());
        let out = ctx_run(&mut r, |r, ctx| {
            r.on_message(
                ctx,
                1,
                VrMessage::PrepareOk {
                    view: 0,
                    op_no: 1,
                    replica: 1,
                },
            )
        });
        assert!(matches!(
            out.as_slice(),
            [VrMessage::Reply { request_no: 1, .. }]
        ));
        assert_eq!(r.executed().len(), 1);
    }

    #[test]
    fn backup_timeout_starts_view_change() {
        let mut r = VrReplica::new(
            1,
            3,
            VrTimeouts {
                view_change_ms: 40,
                recovery_retry_ms: 40,
            },
        );
        ctx_run(&mut r, |r, ctx| {
            r.on_message(ctx, 3, VrMessage::Request(op(1)))
        });
        let gen = r.timer_gen;
        let out = ctx_run(&mut r, |r, ctx| r.on_timer(ctx, VIEW_CHANGE_TIMER | gen));
        assert_eq!(
            out,
            vec![VrMessage::StartViewChange {
                view: 1,
                replica: 1
            }]
        );
        assert_eq!(r.status(), VrStatus::ViewChange);
    }

    #[test]
    fn stale_prepare_is_dropped_and_counted() {
        let mut r = VrReplica::new(
            2,
            3,
            VrTimeouts {
                view_change_ms: 40,
                recovery_retry_ms: 40,
            },
        );
        r.view = 2;
        let out = ctx_run(&mut r, |r, ctx| {
            r.on_message(
                ctx,
                0,
                VrMessage::Prepare {
                    view: 1,
                    op_no: 1,
                    op: op(1),
                    commit_no: 0,
                },
            )
        });
        assert!(out.is_empty());
        assert_eq!(r.dropped_stale, 1);
    }

    #[test]
    fn normal_request_costs_two_n_messages() {
        for n in [3, 5, 7, 9] {
            let rep = vr_run(&VrScenario::normal(n, 1, net()), 4).unwrap();
            assert_eq!(rep.messages, 2 * n as u64, "n={n}");
            assert_eq!(rep.client.completed().len(), 1);
        }
    }

    #[test]
    fn primary_crash_view_change_and_recovery() {
        for seed in 0..40 {
            let scenario = VrScenario {
                crash: Some((0, 35, Some(400))),
                gap_ms: 5,
                ..VrScenario::normal(3, 12, net())
            };
            let rep = vr_run(&scenario, seed).unwrap();
            assert!(rep.prefix_consistent(), "seed {seed}");
            assert_eq!(rep.client.completed().len(), 12, "seed {seed}");
            assert!(rep.view_changes() >= 1, "seed {seed}");
            assert_eq!(rep.replicas[0].status(), VrStatus::Normal, "seed {seed}");
            assert_eq!(rep.replicas[0].recoveries(), 1, "seed {seed}");
        }
    }

    #[test]
    fn any_single_crash_keeps_executed_logs_consistent() {
        use rand::{Rng, SeedableRng};
        let mut pick = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for seed in 0..150 {
            let n = if seed % 2 == 0 { 3 } else { 5 };
            let victim = pick.random_range(0..n);
            let at = pick.random_range(0..300);
            let recover = at + pick.random_range(1..400);
            let scenario = VrScenario {
                crash: Some((victim, at, Some(recover))),
                gap_ms: pick.random_range(0..20),
                ..VrScenario::normal(n, 15, net())
            };
            let rep = vr_run(&scenario, seed).unwrap();
            assert!(rep.prefix_consistent(), "seed {seed}");
            assert_eq!(rep.client.completed().len(), 15, "seed {seed}");
            assert!(
                rep.replicas.iter().all(|r| r.status() == VrStatus::Normal),
                "seed {seed}"
            );
            let done: Vec<u64> = rep.client.completed().iter().map(|c| c.0).collect();
            assert_eq!(done, (1..=15).collect::<Vec<_>>());
        }
    }
}

//! Practical Byzantine Fault Tolerance: three-phase normal case, view
//! change with acknowledgements to the new primary, and checkpoints.
//!
//! Replicas are nodes `0..n`, clients follow. Every message except a raw
//! client request is signed by its sender; requests carry the client's
//! signature inside. A replica drops anything whose signature, view or
//! sequence number does not check out and counts the reason.
//!
//! View-change messages carry prepared sets without the Prepare
//! certificates that would prove them, so a Byzantine replica could forge
//! one; the strategies shipped here do not.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::codec::Writer;
use crate::crypto::{hash, hash_parts, verify, Digest256, KeyPair, PublicKey, Signature};
use crate::netsim::{
    AdversarySpec, Behavior, Context, Message, NetworkModel, Node, NodeId, SimError, SimTime,
    Simulation, Substitution, Trace,
};

const VIEW_CHANGE_TIMER: u64 = 1 << 32;
const RETRY_TIMER: u64 = 3 << 32;
const NEXT_TIMER: u64 = 4 << 32;
const GEN_MASK: u64 = (1 << 32) - 1;
const KEY_SEED: u64 = 0x5042_4654_0000_0000;
pub const DEFAULT_CHECKPOINT_INTERVAL: u64 = 100;
const FUTURE_BUFFER: usize = 4096;

/// Deterministic signing key of node `id`.
pub fn node_keys(id: NodeId) -> KeyPair {
    KeyPair::from_seed(KEY_SEED | id as u64)
}

fn node_public(id: NodeId) -> PublicKey {
    thread_local! {
        static CACHE: RefCell<HashMap<NodeId, PublicKey>> = RefCell::new(HashMap::new());
    }
    CACHE.with(|c| {
        *c.borrow_mut()
            .entry(id)
            .or_insert_with(|| node_keys(id).public())
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Request {
    pub client: NodeId,
    pub request_no: u64,
    pub payload: Vec<u8>,
    pub sig: Signature,
}

impl Request {
    pub fn signed(keys: &KeyPair, client: NodeId, request_no: u64, payload: Vec<u8>) -> Self {
        let mut r = Request {
            client,
            request_no,
            payload,
            sig: Signature::empty(),
        };
        r.sig = keys.sign(&r.signing_bytes());
        r
    }

    fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.client as u64)
            .u64(self.request_no)
            .bytes(&self.payload);
        w.finish()
    }

    pub fn verify(&self) -> bool {
        verify(&node_public(self.client), &self.signing_bytes(), &self.sig)
    }

    fn encode_into(&self, w: &mut Writer) {
        w.u64(self.client as u64)
            .u64(self.request_no)
            .bytes(&self.payload)
            .bytes(self.sig.as_bytes());
    }
}

/// Digest of a request slot; `None` is the null request a new primary
/// uses to fill sequence gaps.
pub fn request_digest(request: Option<&Request>) -> Digest256 {
    match request {
        Some(r) => {
            let mut w = Writer::new();
            r.encode_into(&mut w);
            hash(&w.finish())
        }
        None => hash(b"pbft-null-request"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PreparedCert {
    pub view: u64,
    pub seq: u64,
    pub digest: Digest256,
    pub request: Option<Request>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ViewChangeInfo {
    pub replica: NodeId,
    pub stable: u64,
    pub prepared: Vec<PreparedCert>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NewViewEntry {
    pub seq: u64,
    pub digest: Digest256,
    pub request: Option<Request>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PbftBody {
    Request(Request),
    PrePrepare {
        view: u64,
        seq: u64,
        digest: Digest256,
        request: Option<Request>,
    },
    Prepare {
        view: u64,
        seq: u64,
        digest: Digest256,
    },
    Commit {
        view: u64,
        seq: u64,
        digest: Digest256,
    },
    Reply {
        view: u64,
        client: NodeId,
        request_no: u64,
        result: Digest256,
    },
    Checkpoint {
        seq: u64,
        state: Digest256,
    },
    ViewChange {
        new_view: u64,
        info: ViewChangeInfo,
    },
    ViewChangeAck {
        new_view: u64,
        info: ViewChangeInfo,
    },
    NewView {
        view: u64,
        proofs: Vec<ViewChangeInfo>,
        entries: Vec<NewViewEntry>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PbftMessage {
    pub from: NodeId,
    pub body: PbftBody,
    pub sig: Signature,
}

fn encode_opt_request(w: &mut Writer, r: &Option<Request>) {
    match r {
        Some(r) => {
            w.u8(1);
            r.encode_into(w);
        }
        None => {
            w.u8(0);
        }
    }
}

fn encode_info(w: &mut Writer, info: &ViewChangeInfo) {
    w.u64(info.replica as u64)
        .u64(info.stable)
        .u32(info.prepared.len() as u32);
    for c in &info.prepared {
        w.u64(c.view).u64(c.seq).fixed(c.digest.as_bytes());
        encode_opt_request(w, &c.request);
    }
}

impl PbftBody {
    fn tag(&self) -> u8 {
        match self {
            PbftBody::Request(_) => 0x40,
            PbftBody::PrePrepare { .. } => 0x41,
            PbftBody::Prepare { .. } => 0x42,
            PbftBody::Commit { .. } => 0x43,
            PbftBody::Reply { .. } => 0x44,
            PbftBody::Checkpoint { .. } => 0x45,
            PbftBody::ViewChange { .. } => 0x46,
            PbftBody::ViewChangeAck { .. } => 0x47,
            PbftBody::NewView { .. } => 0x48,
        }
    }

    fn encode_into(&self, w: &mut Writer) {
        w.u8(self.tag());
        match self {
            PbftBody::Request(r) => r.encode_into(w),
            PbftBody::PrePrepare {
                view,
                seq,
                digest,
                request,
            } => {
                w.u64(*view).u64(*seq).fixed(digest.as_bytes());
                encode_opt_request(w, request);
            }
            PbftBody::Prepare { view, seq, digest } | PbftBody::Commit { view, seq, digest } => {
                w.u64(*view).u64(*seq).fixed(digest.as_bytes());
            }
            PbftBody::Reply {
                view,
                client,
                request_no,
                result,
            } => {
                w.u64(*view)
                    .u64(*client as u64)
                    .u64(*request_no)
                    .fixed(result.as_bytes());
            }
            PbftBody::Checkpoint { seq, state } => {
                w.u64(*seq).fixed(state.as_bytes());
            }
            PbftBody::ViewChange { new_view, info }
            | PbftBody::ViewChangeAck { new_view, info } => {
                w.u64(*new_view);
                encode_info(w, info);
            }
            PbftBody::NewView {
                view,
                proofs,
                entries,
            } => {
                w.u64(*view).u32(proofs.len() as u32);
                for p in proofs {
                    encode_info(w, p);
                }
                w.u32(entries.len() as u32);
                for e in entries {
                    w.u64(e.seq).fixed(e.digest.as_bytes());
                    encode_opt_request(w, &e.request);
                }
            }
        }
    }
}

impl PbftMessage {
    fn signing_bytes(from: NodeId, body: &PbftBody) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(from as u64);
        body.encode_into(&mut w);
        w.finish()
    }

    pub fn signed(keys: &KeyPair, from: NodeId, body: PbftBody) -> Self {
        let sig = keys.sign(&Self::signing_bytes(from, &body));
        Self { from, body, sig }
    }

    pub fn unsigned_request(from: NodeId, request: Request) -> Self {
        Self {
            from,
            body: PbftBody::Request(request),
            sig: Signature::empty(),
        }
    }

    pub fn verify(&self) -> bool {
        match &self.body {
            PbftBody::Request(r) => r.verify(),
            body => verify(
                &node_public(self.from),
                &Self::signing_bytes(self.from, body),
                &self.sig,
            ),
        }
    }
}

impl Message for PbftMessage {
    fn tag(&self) -> u8 {
        self.body.tag()
    }

    fn kind(&self) -> &'static str {
        match self.body {
            PbftBody::Request(_) => "request",
            PbftBody::PrePrepare { .. } => "pre_prepare",
            PbftBody::Prepare { .. } => "prepare",
            PbftBody::Commit { .. } => "commit",
            PbftBody::Reply { .. } => "reply",
            PbftBody::Checkpoint { .. } => "checkpoint",
            PbftBody::ViewChange { .. } => "view_change",
            PbftBody::ViewChangeAck { .. } => "view_change_ack",
            PbftBody::NewView { .. } => "new_view",
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.from as u64);
        self.body.encode_into(&mut w);
        w.bytes(self.sig.as_bytes());
        w.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PbftStatus {
    Normal,
    ViewChange,
}

/// How many matching replies a client waits for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyQuorum {
    #[default]
    TwoFPlusOne,
    FPlusOne,
}

impl ReplyQuorum {
    pub fn needed(self, f: usize) -> usize {
        match self {
            ReplyQuorum::TwoFPlusOne => 2 * f + 1,
            ReplyQuorum::FPlusOne => f + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientDecision {
    Accepted {
        result: Digest256,
        conflicting: usize,
    },
    Pending {
        conflicting: usize,
    },
}

/// Client acceptance over replies `(replica, result)` already
/// signature-checked. Replies disagreeing with the winning result are
/// counted as conflicting.
pub fn pbft_client_accept(
    replies: &[(NodeId, Digest256)],
    f: usize,
    rule: ReplyQuorum,
) -> ClientDecision {
    let mut by_result: BTreeMap<Digest256, BTreeSet<NodeId>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (replica, result) in replies {
        if seen.insert(*replica) {
            by_result.entry(*result).or_default().insert(*replica);
        }
    }
    let total = seen.len();
    let best = by_result
        .iter()
        .max_by_key(|(_, s)| s.len())
        .map(|(r, s)| (*r, s.len()));
    match best {
        Some((result, count)) if count >= rule.needed(f) => ClientDecision::Accepted {
            result,
            conflicting: total - count,
        },
        Some((_, count)) => ClientDecision::Pending {
            conflicting: total - count,
        },
        None => ClientDecision::Pending { conflicting: 0 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PbftConfig {
    pub checkpoint_interval: u64,
    pub view_change_ms: u64,
}

impl PbftConfig {
    /// View-change timer of four mean link delays.
    pub fn for_model(model: &NetworkModel) -> Self {
        let mean = model.synchrony.mean_delay_ms().max(1.0);
        Self {
            checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL,
            view_change_ms: (4.0 * mean).ceil() as u64,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Entry {
    pre_prepare: Option<(Digest256, Option<Request>)>,
    prepares: BTreeMap<Digest256, BTreeSet<NodeId>>,
    commits: BTreeMap<Digest256, BTreeSet<NodeId>>,
    prepared: bool,
    commit_sent: bool,
    committed: bool,
}

#[derive(Debug, Clone)]
pub struct PbftReplica {
    id: NodeId,
    n: usize,
    f: usize,
    keys: KeyPair,
    cfg: PbftConfig,
    view: u64,
    status: PbftStatus,
    next_seq: u64,
    entries: BTreeMap<(u64, u64), Entry>,
    committed: BTreeMap<u64, (Digest256, Option<Request>)>,
    last_executed: u64,
    executed: Vec<(u64, Digest256)>,
    state: Digest256,
    stable: u64,
    checkpoints: BTreeMap<u64, BTreeMap<Digest256, BTreeSet<NodeId>>>,
    client_table: BTreeMap<NodeId, (u64, Digest256)>,
    assigned: BTreeSet<(NodeId, u64)>,
    pending: BTreeMap<(NodeId, u64), Request>,
    view_change_votes: BTreeMap<u64, BTreeSet<NodeId>>,
    acks: BTreeMap<u64, BTreeMap<NodeId, ViewChangeInfo>>,
    future: Vec<PbftMessage>,
    timer_gen: u64,
    timer_armed: bool,
    dropped: BTreeMap<&'static str, u64>,
    view_changes: u64,
    vc_streak: u32,
    executed_at: Vec<(u64, SimTime)>,
}

impl PbftReplica {
    pub fn new(id: NodeId, n: usize, cfg: PbftConfig) -> Self {
        Self {
            id,
            n,
            f: (n - 1) / 3,
            keys: node_keys(id),
            cfg,
            view: 0,
            status: PbftStatus::Normal,
            next_seq: 1,
            entries: BTreeMap::new(),
            committed: BTreeMap::new(),
            last_executed: 0,
            executed: Vec::new(),
            state: Digest256::ZERO,
            stable: 0,
            checkpoints: BTreeMap::new(),
            client_table: BTreeMap::new(),
            assigned: BTreeSet::new(),
            pending: BTreeMap::new(),
            view_change_votes: BTreeMap::new(),
            acks: BTreeMap::new(),
            future: Vec::new(),
            timer_gen: 0,
            timer_armed: false,
            dropped: BTreeMap::new(),
            view_changes: 0,
            vc_streak: 0,
            executed_at: Vec::new(),
        }
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn status(&self) -> PbftStatus {
        self.status
    }

    /// `(seq, request digest)` in execution order.
    pub fn executed(&self) -> &[(u64, Digest256)] {
        &self.executed
    }

    /// `(seq, time)` of every execution.
    pub fn executed_at(&self) -> &[(u64, SimTime)] {
        &self.executed_at
    }

    pub fn stable_checkpoint(&self) -> u64 {
        self.stable
    }

    pub fn dropped(&self) -> &BTreeMap<&'static str, u64> {
        &self.dropped
    }

    pub fn view_changes(&self) -> u64 {
        self.view_changes
    }

    /// Log entries still held, i.e. above the stable checkpoint.
    pub fn log_len(&self) -> usize {
        self.entries.len()
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

    fn drop_msg(&mut self, reason: &'static str) {
        *self.dropped.entry(reason).or_default() += 1;
    }

    fn sign(&self, body: PbftBody) -> PbftMessage {
        PbftMessage::signed(&self.keys, self.id, body)
    }

    fn multicast(&self, ctx: &mut Context<'_, PbftMessage>, body: PbftBody) {
        ctx.multicast(&self.replicas(), self.sign(body));
    }

    fn arm_timer(&mut self, ctx: &mut Context<'_, PbftMessage>) {
        self.timer_gen += 1;
        self.timer_armed = true;
        // Back off across consecutive failed view changes.
        let backoff = 1u64 << self.vc_streak.min(6);
        ctx.set_timer(
            self.cfg.view_change_ms * backoff,
            VIEW_CHANGE_TIMER | (self.timer_gen & GEN_MASK),
        );
    }

    fn disarm_timer(&mut self) {
        self.timer_gen += 1;
        self.timer_armed = false;
    }

    fn executed_request(&self, client: NodeId, request_no: u64) -> Option<Digest256> {
        self.client_table
            .get(&client)
            .filter(|(rn, _)| *rn >= request_no)
            .map(|(_, r)| *r)
    }

    fn on_request(&mut self, ctx: &mut Context<'_, PbftMessage>, from: NodeId, req: Request) {
        if let Some(result) = self.executed_request(req.client, req.request_no) {
            if self.client_table[&req.client].0 == req.request_no {
                let body = PbftBody::Reply {
                    view: self.view,
                    client: req.client,
                    request_no: req.request_no,
                    result,
                };
                ctx.send(req.client, self.sign(body));
            }
            return;
        }
        let key = (req.client, req.request_no);
        self.pending.insert(key, req.clone());
        if self.status != PbftStatus::Normal {
            return;
        }
        if self.is_primary() {
            self.propose(ctx, req);
        } else {
            if from == req.client {
                ctx.send(
                    self.primary_of(self.view),
                    PbftMessage::unsigned_request(self.id, req),
                );
            }
            if !self.timer_armed {
                self.arm_timer(ctx);
            }
        }
    }

    fn propose(&mut self, ctx: &mut Context<'_, PbftMessage>, req: Request) {
        let key = (req.client, req.request_no);
        if !self.assigned.insert(key) {
            return;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let digest = request_digest(Some(&req));
        let entry = self.entries.entry((self.view, seq)).or_default();
        entry.pre_prepare = Some((digest, Some(req.clone())));
        self.multicast(
            ctx,
            PbftBody::PrePrepare {
                view: self.view,
                seq,
                digest,
                request: Some(req),
            },
        );
        self.check_prepared(ctx, self.view, seq);
    }

    fn buffer_future(&mut self, msg: PbftMessage) {
        if self.future.len() < FUTURE_BUFFER {
            self.future.push(msg);
        } else {
            self.drop_msg("future_overflow");
        }
    }

    /// Shared view/seq screening for the three normal-case phases.
    fn screen(&mut self, msg: &PbftMessage, view: u64, seq: u64) -> bool {
        if view > self.view || (view == self.view && self.status != PbftStatus::Normal) {
            self.buffer_future(msg.clone());
            return false;
        }
        if view < self.view {
            self.drop_msg("stale_view");
            return false;
        }
        if seq <= self.stable {
            self.drop_msg("below_stable");
            return false;
        }
        true
    }

    fn accept_pre_prepare(
        &mut self,
        ctx: &mut Context<'_, PbftMessage>,
        view: u64,
        seq: u64,
        digest: Digest256,
        request: Option<Request>,
    ) {
        if request_digest(request.as_ref()) != digest
            || request.as_ref().is_some_and(|r| !r.verify())
        {
            self.drop_msg("bad_request");
            return;
        }
        let entry = self.entries.entry((view, seq)).or_default();
        if let Some((d, _)) = &entry.pre_prepare {
            if *d != digest {
                self.drop_msg("conflicting_pre_prepare");
            }
            return;
        }
        entry.pre_prepare = Some((digest, request.clone()));
        entry.prepares.entry(digest).or_default().insert(self.id);
        if let Some(r) = request {
            if self.executed_request(r.client, r.request_no).is_none() {
                self.pending.insert((r.client, r.request_no), r);
                if !self.timer_armed {
                    self.arm_timer(ctx);
                }
            }
        }
        self.multicast(ctx, PbftBody::Prepare { view, seq, digest });
        self.check_prepared(ctx, view, seq);
    }

    fn check_prepared(&mut self, ctx: &mut Context<'_, PbftMessage>, view: u64, seq: u64) {
        let primary = self.primary_of(view);
        let quorum = 2 * self.f;
        let Some(entry) = self.entries.get_mut(&(view, seq)) else {
            return;
        };
        let Some((digest, _)) = entry.pre_prepare.clone() else {
            return;
        };
        let prepares = entry
            .prepares
            .get(&digest)
            .map_or(0, |s| s.iter().filter(|r| **r != primary).count());
        if prepares < quorum || entry.commit_sent {
            return;
        }
        entry.prepared = true;
        entry.commit_sent = true;
        entry.commits.entry(digest).or_default().insert(self.id);
        self.multicast(ctx, PbftBody::Commit { view, seq, digest });
        self.check_committed(ctx, view, seq);
    }

    fn check_committed(&mut self, ctx: &mut Context<'_, PbftMessage>, view: u64, seq: u64) {
        let quorum = 2 * self.f + 1;
        let Some(entry) = self.entries.get_mut(&(view, seq)) else {
            return;
        };
        if !entry.prepared || entry.committed {
            return;
        }
        let Some((digest, request)) = entry.pre_prepare.clone() else {
            return;
        };
        if entry.commits.get(&digest).map_or(0, |s| s.len()) < quorum {
            return;
        }
        entry.committed = true;
        self.committed.entry(seq).or_insert((digest, request));
        self.try_execute(ctx);
    }

    fn try_execute(&mut self, ctx: &mut Context<'_, PbftMessage>) {
        let mut progressed = false;
        while let Some((digest, request)) = self.committed.get(&(self.last_executed + 1)).cloned() {
            let seq = self.last_executed + 1;
            self.last_executed = seq;
            self.state =
                hash_parts(&[self.state.as_bytes(), &seq.to_be_bytes(), digest.as_bytes()]);
            if let Some(r) = request {
                self.pending.remove(&(r.client, r.request_no));
                if self.executed_request(r.client, r.request_no).is_none() {
                    self.client_table
                        .insert(r.client, (r.request_no, self.state));
                    let body = PbftBody::Reply {
                        view: self.view,
                        client: r.client,
                        request_no: r.request_no,
                        result: self.state,
                    };
                    ctx.send(r.client, self.sign(body));
                }
            }
            self.executed.push((seq, digest));
            self.executed_at.push((seq, ctx.now()));
            ctx.mark("execute", format!("{seq}:{}", digest.short()));
            progressed = true;
            if seq % self.cfg.checkpoint_interval == 0 {
                self.checkpoints
                    .entry(seq)
                    .or_default()
                    .entry(self.state)
                    .or_default()
                    .insert(self.id);
                self.multicast(
                    ctx,
                    PbftBody::Checkpoint {
                        seq,
                        state: self.state,
                    },
                );
                self.check_stable(ctx, seq);
            }
        }
        if progressed && self.status == PbftStatus::Normal {
            if self.pending.is_empty() {
                self.disarm_timer();
            } else {
                self.arm_timer(ctx);
            }
        }
    }

    fn check_stable(&mut self, ctx: &mut Context<'_, PbftMessage>, seq: u64) {
        if seq <= self.stable || seq > self.last_executed {
            return;
        }
        let quorum = 2 * self.f + 1;
        let Some(votes) = self.checkpoints.get(&seq) else {
            return;
        };
        if !votes.values().any(|s| s.len() >= quorum) {
            return;
        }
        self.stable = seq;
        self.entries.retain(|(_, s), _| *s > seq);
        self.committed.retain(|s, _| *s > seq);
        self.checkpoints.retain(|s, _| *s >= seq);
        ctx.mark("stable_checkpoint", seq.to_string());
    }

    fn prepared_set(&self) -> Vec<PreparedCert> {
        let mut best: BTreeMap<u64, PreparedCert> = BTreeMap::new();
        for (&(view, seq), e) in &self.entries {
            if !e.prepared || seq <= self.stable {
                continue;
            }
            let (digest, request) = e
                .pre_prepare
                .clone()
                .expect("prepared entries have a pre-prepare");
            if best.get(&seq).is_none_or(|c| c.view < view) {
                best.insert(
                    seq,
                    PreparedCert {
                        view,
                        seq,
                        digest,
                        request,
                    },
                );
            }
        }
        best.into_values().collect()
    }

    fn start_view_change(&mut self, ctx: &mut Context<'_, PbftMessage>, new_view: u64) {
        self.view = new_view;
        self.status = PbftStatus::ViewChange;
        self.view_changes += 1;
        self.vc_streak += 1;
        ctx.mark("view_change", new_view.to_string());
        let info = ViewChangeInfo {
            replica: self.id,
            stable: self.stable,
            prepared: self.prepared_set(),
        };
        self.view_change_votes
            .entry(new_view)
            .or_default()
            .insert(self.id);
        self.multicast(
            ctx,
            PbftBody::ViewChange {
                new_view,
                info: info.clone(),
            },
        );
        let primary = self.primary_of(new_view);
        if primary == self.id {
            self.acks.entry(new_view).or_default().insert(self.id, info);
        } else {
            ctx.send(
                primary,
                self.sign(PbftBody::ViewChangeAck { new_view, info }),
            );
        }
        self.disarm_timer();
        self.check_view_change_timer(ctx);
        self.check_new_view(ctx);
    }

    /// The timer towards the next view only runs once `2f+1` replicas want
    /// this one, so a lone replica that timed out cannot run away.
    fn check_view_change_timer(&mut self, ctx: &mut Context<'_, PbftMessage>) {
        let votes = self
            .view_change_votes
            .get(&self.view)
            .map_or(0, |s| s.len());
        if self.status == PbftStatus::ViewChange && !self.timer_armed && votes > 2 * self.f {
            self.arm_timer(ctx);
        }
    }

    fn on_view_change_vote(
        &mut self,
        ctx: &mut Context<'_, PbftMessage>,
        from: NodeId,
        new_view: u64,
    ) {
        if new_view < self.view || (new_view == self.view && self.status == PbftStatus::Normal) {
            self.drop_msg("stale_view");
            return;
        }
        self.view_change_votes
            .entry(new_view)
            .or_default()
            .insert(from);
        if new_view > self.view && self.view_change_votes[&new_view].len() > self.f {
            self.start_view_change(ctx, new_view);
        } else {
            self.check_view_change_timer(ctx);
        }
    }

    fn on_ack(
        &mut self,
        ctx: &mut Context<'_, PbftMessage>,
        from: NodeId,
        new_view: u64,
        info: ViewChangeInfo,
    ) {
        if self.primary_of(new_view) != self.id || info.replica != from {
            self.drop_msg("misrouted_ack");
            return;
        }
        if new_view < self.view || (new_view == self.view && self.status == PbftStatus::Normal) {
            self.drop_msg("stale_view");
            return;
        }
        self.acks.entry(new_view).or_default().insert(from, info);
        self.on_view_change_vote(ctx, from, new_view);
        self.check_new_view(ctx);
    }

    fn check_new_view(&mut self, ctx: &mut Context<'_, PbftMessage>) {
        let view = self.view;
        if self.status != PbftStatus::ViewChange || self.primary_of(view) != self.id {
            return;
        }
        let Some(acks) = self.acks.get(&view) else {
            return;
        };
        let others = acks.keys().filter(|r| **r != self.id).count();
        if !acks.contains_key(&self.id) || others < 2 * self.f {
            return;
        }
        let mut proofs: Vec<ViewChangeInfo> = vec![acks[&self.id].clone()];
        proofs.extend(
            acks.iter()
                .filter(|(r, _)| **r != self.id)
                .take(2 * self.f)
                .map(|(_, i)| i.clone()),
        );
        let entries = new_view_entries(&proofs);
        ctx.mark("new_view", view.to_string());
        self.multicast(
            ctx,
            PbftBody::NewView {
                view,
                proofs,
                entries: entries.clone(),
            },
        );
        self.enter_view(ctx, view, entries);
    }

    fn on_new_view(
        &mut self,
        ctx: &mut Context<'_, PbftMessage>,
        from: NodeId,
        view: u64,
        proofs: Vec<ViewChangeInfo>,
        entries: Vec<NewViewEntry>,
    ) {
        if view < self.view || (view == self.view && self.status == PbftStatus::Normal) {
            self.drop_msg("stale_view");
            return;
        }
        let distinct: BTreeSet<NodeId> = proofs.iter().map(|p| p.replica).collect();
        if from != self.primary_of(view)
            || distinct.len() != proofs.len()
            || proofs.len() < 2 * self.f + 1
        {
            self.drop_msg("bad_new_view");
            return;
        }
        if new_view_entries(&proofs) != entries {
            self.drop_msg("bad_new_view");
            return;
        }
        self.enter_view(ctx, view, entries);
    }

    fn enter_view(
        &mut self,
        ctx: &mut Context<'_, PbftMessage>,
        view: u64,
        entries: Vec<NewViewEntry>,
    ) {
        self.view = view;
        self.status = PbftStatus::Normal;
        self.vc_streak = 0;
        self.assigned.clear();
        self.disarm_timer();
        let primary = self.is_primary();
        let top = entries.iter().map(|e| e.seq).max().unwrap_or(0);
        self.next_seq = top.max(self.stable).max(self.last_executed) + 1;
        for e in entries {
            if let Some(r) = &e.request {
                self.assigned.insert((r.client, r.request_no));
            }
            if e.seq <= self.stable {
                continue;
            }
            if primary {
                let entry = self.entries.entry((view, e.seq)).or_default();
                entry.pre_prepare = Some((e.digest, e.request));
            } else {
                self.accept_pre_prepare(ctx, view, e.seq, e.digest, e.request);
            }
        }
        if primary {
            let waiting: Vec<Request> = self.pending.values().cloned().collect();
            for r in waiting {
                if self.executed_request(r.client, r.request_no).is_none() {
                    self.propose(ctx, r);
                }
            }
        } else if !self.pending.is_empty() && !self.timer_armed {
            self.arm_timer(ctx);
        }
        let future = std::mem::take(&mut self.future);
        for msg in future {
            let from = msg.from;
            self.dispatch(ctx, from, msg);
        }
    }

    fn on_timer_fired(&mut self, ctx: &mut Context<'_, PbftMessage>, timer: u64) {
        if timer & !GEN_MASK != VIEW_CHANGE_TIMER
            || timer & GEN_MASK != self.timer_gen & GEN_MASK
            || !self.timer_armed
        {
            return;
        }
        self.timer_armed = false;
        if self.status == PbftStatus::ViewChange || !self.pending.is_empty() {
            self.start_view_change(ctx, self.view + 1);
        }
    }

    fn dispatch(&mut self, ctx: &mut Context<'_, PbftMessage>, from: NodeId, msg: PbftMessage) {
        match msg.body.clone() {
            PbftBody::Request(r) => self.on_request(ctx, from, r),
            PbftBody::PrePrepare {
                view,
                seq,
                digest,
                request,
            } => {
                if !self.screen(&msg, view, seq) {
                    return;
                }
                if from != self.primary_of(view) || self.is_primary() {
                    self.drop_msg("not_from_primary");
                    return;
                }
                self.accept_pre_prepare(ctx, view, seq, digest, request);
            }
            PbftBody::Prepare { view, seq, digest } => {
                if !self.screen(&msg, view, seq) {
                    return;
                }
                if from == self.primary_of(view) {
                    self.drop_msg("prepare_from_primary");
                    return;
                }
                self.entries
                    .entry((view, seq))
                    .or_default()
                    .prepares
                    .entry(digest)
                    .or_default()
                    .insert(from);
                self.check_prepared(ctx, view, seq);
            }
            PbftBody::Commit { view, seq, digest } => {
                // A commit certificate from an older view is still a
                // certificate; a replica that moved on early can use it.
                if view < self.view && seq > self.stable && self.entries.contains_key(&(view, seq))
                {
                    self.entries
                        .get_mut(&(view, seq))
                        .unwrap()
                        .commits
                        .entry(digest)
                        .or_default()
                        .insert(from);
                    self.check_committed(ctx, view, seq);
                    return;
                }
                if !self.screen(&msg, view, seq) {
                    return;
                }
                self.entries
                    .entry((view, seq))
                    .or_default()
                    .commits
                    .entry(digest)
                    .or_default()
                    .insert(from);
                self.check_committed(ctx, view, seq);
            }
            PbftBody::Checkpoint { seq, state } => {
                if seq <= self.stable {
                    self.drop_msg("below_stable");
                    return;
                }
                self.checkpoints
                    .entry(seq)
                    .or_default()
                    .entry(state)
                    .or_default()
                    .insert(from);
                self.check_stable(ctx, seq);
            }
            PbftBody::ViewChange { new_view, info } => {
                if info.replica != from {
                    self.drop_msg("bad_view_change");
                    return;
                }
                self.on_view_change_vote(ctx, from, new_view);
            }
            PbftBody::ViewChangeAck { new_view, info } => self.on_ack(ctx, from, new_view, info),
            PbftBody::NewView {
                view,
                proofs,
                entries,
            } => self.on_new_view(ctx, from, view, proofs, entries),
            PbftBody::Reply { .. } => {}
        }
    }
}

/// Re-proposals a new primary derives from `2f+1` view-change reports:
/// for each sequence number above the highest reported stable checkpoint
/// up to the highest prepared one, the request prepared in the latest
/// view, or the null request if none was.
pub fn new_view_entries(proofs: &[ViewChangeInfo]) -> Vec<NewViewEntry> {
    let low = proofs.iter().map(|p| p.stable).max().unwrap_or(0);
    let mut best: BTreeMap<u64, &PreparedCert> = BTreeMap::new();
    for c in proofs.iter().flat_map(|p| &p.prepared) {
        if c.seq > low && best.get(&c.seq).is_none_or(|b| b.view < c.view) {
            best.insert(c.seq, c);
        }
    }
    let high = best.keys().max().copied().unwrap_or(low);
    ((low + 1)..=high)
        .map(|seq| match best.get(&seq) {
            Some(c) => NewViewEntry {
                seq,
                digest: c.digest,
                request: c.request.clone(),
            },
            None => NewViewEntry {
                seq,
                digest: request_digest(None),
                request: None,
            },
        })
        .collect()
}

impl Node for PbftReplica {
    type Msg = PbftMessage;

    fn on_message(&mut self, ctx: &mut Context<'_, PbftMessage>, from: NodeId, msg: PbftMessage) {
        if msg.from != from || !msg.verify() {
            self.drop_msg("bad_signature");
            return;
        }
        self.dispatch(ctx, from, msg);
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, PbftMessage>, timer: u64) {
        self.on_timer_fired(ctx, timer);
    }

    fn snapshot(&self) -> Option<String> {
        Some(format!(
            "view={} status={:?} executed={} stable={} state={}",
            self.view,
            self.status,
            self.last_executed,
            self.stable,
            self.state.short()
        ))
    }
}

#[derive(Debug, Clone)]
pub struct PbftClient {
    id: NodeId,
    n: usize,
    f: usize,
    keys: KeyPair,
    rule: ReplyQuorum,
    total: u64,
    gap_ms: u64,
    retry_ms: u64,
    next: u64,
    view_guess: u64,
    outstanding: Option<(Request, SimTime)>,
    replies: BTreeMap<NodeId, Digest256>,
    retry_gen: u64,
    completed: Vec<(u64, Digest256, SimTime)>,
    conflicting: u64,
    rejected: u64,
}

impl PbftClient {
    pub fn new(
        id: NodeId,
        n_replicas: usize,
        total: u64,
        rule: ReplyQuorum,
        gap_ms: u64,
        retry_ms: u64,
    ) -> Self {
        Self {
            id,
            n: n_replicas,
            f: (n_replicas - 1) / 3,
            keys: node_keys(id),
            rule,
            total,
            gap_ms,
            retry_ms,
            next: 0,
            view_guess: 0,
            outstanding: None,
            replies: BTreeMap::new(),
            retry_gen: 0,
            completed: Vec::new(),
            conflicting: 0,
            rejected: 0,
        }
    }

    /// `(request_no, result, latency_ms)` per accepted request.
    pub fn completed(&self) -> &[(u64, Digest256, SimTime)] {
        &self.completed
    }

    pub fn conflicting_replies(&self) -> u64 {
        self.conflicting
    }

    fn send_next(&mut self, ctx: &mut Context<'_, PbftMessage>) {
        self.next += 1;
        let payload = format!("op-{}-{}", self.id, self.next).into_bytes();
        let req = Request::signed(&self.keys, self.id, self.next, payload);
        let primary = (self.view_guess % self.n as u64) as NodeId;
        ctx.send(primary, PbftMessage::unsigned_request(self.id, req.clone()));
        self.outstanding = Some((req, ctx.now()));
        self.replies.clear();
        self.retry_gen += 1;
        ctx.set_timer(self.retry_ms, RETRY_TIMER | (self.retry_gen & GEN_MASK));
    }
}

impl Node for PbftClient {
    type Msg = PbftMessage;

    fn on_start(&mut self, ctx: &mut Context<'_, PbftMessage>) {
        if self.total > 0 {
            self.send_next(ctx);
        }
    }

    fn on_message(&mut self, ctx: &mut Context<'_, PbftMessage>, from: NodeId, msg: PbftMessage) {
        if msg.from != from || from >= self.n || !msg.verify() {
            self.rejected += 1;
            return;
        }
        let PbftBody::Reply {
            view,
            client,
            request_no,
            result,
        } = msg.body
        else {
            return;
        };
        let Some((req, sent)) = &self.outstanding else {
            return;
        };
        if client != self.id || req.request_no != request_no {
            return;
        }
        let sent = *sent;
        self.replies.insert(from, result);
        self.view_guess = self.view_guess.max(view);
        let replies: Vec<(NodeId, Digest256)> =
            self.replies.iter().map(|(r, d)| (*r, *d)).collect();
        if let ClientDecision::Accepted {
            result,
            conflicting,
        } = pbft_client_accept(&replies, self.f, self.rule)
        {
            self.conflicting += conflicting as u64;
            self.completed.push((request_no, result, ctx.now() - sent));
            self.outstanding = None;
            ctx.mark("accept", request_no.to_string());
            if self.next < self.total {
                if self.gap_ms == 0 {
                    self.send_next(ctx);
                } else {
                    ctx.set_timer(self.gap_ms, NEXT_TIMER);
                }
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, PbftMessage>, timer: u64) {
        if timer == NEXT_TIMER {
            self.send_next(ctx);
        } else if timer & !GEN_MASK == RETRY_TIMER && timer & GEN_MASK == self.retry_gen & GEN_MASK
        {
            if let Some((req, _)) = &self.outstanding {
                let replicas: Vec<NodeId> = (0..self.n).collect();
                ctx.multicast(
                    &replicas,
                    PbftMessage::unsigned_request(self.id, req.clone()),
                );
                self.retry_gen += 1;
                ctx.set_timer(self.retry_ms, RETRY_TIMER | (self.retry_gen & GEN_MASK));
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum PbftActor {
    Replica(Box<PbftReplica>),
    Client(PbftClient),
}

impl Node for PbftActor {
    type Msg = PbftMessage;

    fn on_start(&mut self, ctx: &mut Context<'_, PbftMessage>) {
        match self {
            PbftActor::Replica(r) => r.on_start(ctx),
            PbftActor::Client(c) => c.on_start(ctx),
        }
    }

    fn on_message(&mut self, ctx: &mut Context<'_, PbftMessage>, from: NodeId, msg: PbftMessage) {
        match self {
            PbftActor::Replica(r) => r.on_message(ctx, from, msg),
            PbftActor::Client(c) => c.on_message(ctx, from, msg),
        }
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, PbftMessage>, timer: u64) {
        match self {
            PbftActor::Replica(r) => r.on_timer(ctx, timer),
            PbftActor::Client(c) => c.on_timer(ctx, timer),
        }
    }

    fn snapshot(&self) -> Option<String> {
        match self {
            PbftActor::Replica(r) => r.snapshot(),
            PbftActor::Client(_) => None,
        }
    }
}

/// Equivocation for a Byzantine replica: each recipient gets its own
/// variant of every ordering message and reply, properly re-signed.
pub fn equivocating_replica(id: NodeId) -> Behavior<PbftMessage> {
    let keys = node_keys(id);
    Behavior::Equivocate(Box::new(
        move |from: NodeId, to: NodeId, msg: &PbftMessage| {
            let salt = (to as u64).to_be_bytes();
            let twist = |d: &Digest256| hash_parts(&[d.as_bytes(), &salt]);
            let body = match &msg.body {
                PbftBody::PrePrepare {
                    view,
                    seq,
                    request: Some(r),
                    ..
                } => {
                    let mut forged = r.clone();
                    forged.payload.extend_from_slice(&salt);
                    let digest = request_digest(Some(&forged));
                    PbftBody::PrePrepare {
                        view: *view,
                        seq: *seq,
                        digest,
                        request: Some(forged),
                    }
                }
                PbftBody::Prepare { view, seq, digest } => PbftBody::Prepare {
                    view: *view,
                    seq: *seq,
                    digest: twist(digest),
                },
                PbftBody::Commit { view, seq, digest } => PbftBody::Commit {
                    view: *view,
                    seq: *seq,
                    digest: twist(digest),
                },
                PbftBody::Reply {
                    view,
                    client,
                    request_no,
                    result,
                } => PbftBody::Reply {
                    view: *view,
                    client: *client,
                    request_no: *request_no,
                    result: twist(result),
                },
                _ => return Substitution::Keep,
            };
            Substitution::Replace(PbftMessage::signed(&keys, from, body))
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PbftFault {
    Equivocate,
    Silent,
    Crash { at: SimTime },
}

#[derive(Debug, Clone)]
pub struct PbftScenario {
    pub n: usize,
    pub requests: u64,
    pub gap_ms: u64,
    pub model: NetworkModel,
    pub faults: Vec<(NodeId, PbftFault)>,
    pub config: Option<PbftConfig>,
    pub reply_quorum: ReplyQuorum,
    pub client_retry_ms: Option<u64>,
    pub horizon_ms: Option<SimTime>,
}

impl PbftScenario {
    pub fn normal(n: usize, requests: u64, model: NetworkModel) -> Self {
        Self {
            n,
            requests,
            gap_ms: 0,
            model,
            faults: Vec::new(),
            config: None,
            reply_quorum: ReplyQuorum::default(),
            client_retry_ms: None,
            horizon_ms: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PbftReport {
    pub replicas: Vec<PbftReplica>,
    pub client: PbftClient,
    pub faulty: Vec<NodeId>,
    pub messages: u64,
    pub sent_by_kind: BTreeMap<&'static str, u64>,
    pub end_time: SimTime,
    pub trace: Trace,
}

impl PbftReport {
    pub fn honest(&self) -> impl Iterator<Item = &PbftReplica> {
        self.replicas
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.faulty.contains(i))
            .map(|(_, r)| r)
    }

    /// All honest replicas executed the same sequence.
    pub fn honest_logs_identical(&self) -> bool {
        let mut logs = self.honest().map(|r| r.executed());
        let Some(first) = logs.next() else {
            return true;
        };
        logs.all(|l| l == first)
    }

    /// Honest executed sequences are prefixes of one another.
    pub fn honest_logs_consistent(&self) -> bool {
        let logs: Vec<_> = self.honest().map(|r| r.executed()).collect();
        let Some(longest) = logs.iter().max_by_key(|l| l.len()) else {
            return true;
        };
        logs.iter().all(|l| longest.starts_with(l))
    }

    /// Messages of the four normal-case phases.
    pub fn normal_case_messages(&self) -> u64 {
        ["pre_prepare", "prepare", "commit", "reply"]
            .iter()
            .map(|k| self.sent_by_kind.get(k).copied().unwrap_or(0))
            .sum()
    }
}

pub fn pbft_run(scenario: &PbftScenario, seed: u64) -> Result<PbftReport, SimError> {
    let n = scenario.n;
    if n == 0 {
        return Err(SimError::Config("PBFT needs at least one replica".into()));
    }
    let cfg = scenario
        .config
        .unwrap_or_else(|| PbftConfig::for_model(&scenario.model));
    let retry = scenario.client_retry_ms.unwrap_or(cfg.view_change_ms * 3);
    let mut nodes: Vec<PbftActor> = (0..n)
        .map(|i| PbftActor::Replica(Box::new(PbftReplica::new(i, n, cfg))))
        .collect();
    nodes.push(PbftActor::Client(PbftClient::new(
        n,
        n,
        scenario.requests,
        scenario.reply_quorum,
        scenario.gap_ms,
        retry,
    )));
    let mut adversary = AdversarySpec::honest();
    for &(node, fault) in &scenario.faults {
        let behavior = match fault {
            PbftFault::Equivocate => equivocating_replica(node),
            PbftFault::Silent => Behavior::Withhold,
            PbftFault::Crash { at } => Behavior::Crash {
                at,
                recover_at: None,
            },
        };
        adversary = adversary.with(node, behavior);
    }
    let mut sim = Simulation::new(nodes, scenario.model.clone(), adversary, seed);
    let outcome = sim.run(scenario.horizon_ms)?;
    sim.snapshot_all();
    let stats = sim.stats().clone();
    let mut replicas = Vec::with_capacity(n);
    let mut client = None;
    for node in sim.nodes() {
        match node {
            PbftActor::Replica(r) => replicas.push((**r).clone()),
            PbftActor::Client(c) => client = Some(c.clone()),
        }
    }
    Ok(PbftReport {
        replicas,
        client: client.expect("client node"),
        faulty: scenario.faults.iter().map(|(id, _)| *id).collect(),
        messages: stats.sent,
        sent_by_kind: stats.sent_by_kind,
        end_time: outcome.end_time,
        trace: sim.into_trace(),
    })
}

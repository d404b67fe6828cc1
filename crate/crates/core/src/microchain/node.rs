use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::incentives::{apply_incentives, CreditLedger, EpochEvents, IncentiveParams};
use super::poc::{verify_block_poc, PocProposer, PocReject};
use super::randshare::{default_threshold, RandShareMsg, RandShareSession, RandShareStatus};
use super::sortition::{draw_ticket, select_committee};
use super::vote::{tally_checked, EquivocationEvidence, TallyOutcome, Vote};
use super::{genesis_init, Dynasty, MicrochainError};
use crate::codec::{Canonical, Writer};
use crate::crypto::{verify, Digest256, KeyPair, PublicKey, Signature};
use crate::ledger::{
    Block, BlockTemplate, Checkpoint, FinalizeError, ForkTree, InsertOutcome, Transaction,
};
use crate::netsim::{
    AdversarySpec, Behavior, Context, Halt, Message, NetworkModel, Node, NodeId, Simulation, Trace,
    TraceLevel,
};

const SLOT_TIMER: u64 = 1;
const PROBE_TIMER: u64 = 2;
const REVEAL_TIMER: u64 = 1 << 40;
const FINISH_TIMER: u64 = 2 << 40;
const TIMER_KIND_MASK: u64 = !((1 << 40) - 1);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValidatorFault {
    #[default]
    Honest,
    /// Votes for every block it knows at a boundary height and, when eligible,
    /// sends different sibling blocks to the two halves of the network.
    DoubleVote,
    /// Never proposes, votes or reveals.
    Silent,
    Crash {
        at_ms: u64,
        #[serde(default)]
        recover_ms: Option<u64>,
    },
}

impl ValidatorFault {
    pub fn is_byzantine(&self) -> bool {
        matches!(self, ValidatorFault::DoubleVote)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidatorSpec {
    pub seed: u64,
    pub credit: u64,
    #[serde(default)]
    pub fault: ValidatorFault,
}

impl ValidatorSpec {
    pub fn honest(seed: u64, credit: u64) -> Self {
        Self {
            seed,
            credit,
            fault: ValidatorFault::Honest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MicrochainParams {
    pub epoch_length: u64,
    pub slot_ms: u64,
    /// Expected number of eligible proposers per slot.
    pub rho: f64,
    /// Seats per dynasty; 0 seats every validator.
    pub committee_size: usize,
    /// 0 keeps the initial dynasty forever.
    pub epochs_per_dynasty: u64,
    /// Payload bytes per proposed block, carried by one filler transaction.
    pub block_bytes: usize,
    /// Payload bytes of each probe transaction.
    pub tx_bytes: usize,
    pub probe_txs: bool,
    /// Length of each of the two secret-sharing phases.
    pub randshare_window_ms: u64,
    pub incentives: IncentiveParams,
}

impl Default for MicrochainParams {
    fn default() -> Self {
        Self {
            epoch_length: 10,
            slot_ms: 1000,
            rho: 1.0,
            committee_size: 0,
            epochs_per_dynasty: 0,
            block_bytes: 0,
            tx_bytes: 250,
            probe_txs: true,
            randshare_window_ms: 2000,
            incentives: IncentiveParams::default(),
        }
    }
}

impl MicrochainParams {
    pub fn validate(&self) -> Result<(), MicrochainError> {
        let bad = |m: &str| Err(MicrochainError::Sim(m.to_string()));
        if self.epoch_length == 0 {
            return bad("epoch_length must be positive");
        }
        if self.slot_ms < 2 {
            return bad("slot_ms must be at least 2");
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(MicrochainError::BadRho(self.rho));
        }
        if self.epochs_per_dynasty > 0 && self.randshare_window_ms == 0 {
            return bad("randshare_window_ms must be positive when dynasties rotate");
        }
        Ok(())
    }

    /// Heights covered by one dynasty, or 0 without rotation.
    pub fn dynasty_span(&self) -> u64 {
        self.epoch_length * self.epochs_per_dynasty
    }

    pub fn dynasty_of_height(&self, height: u64) -> u64 {
        match self.dynasty_span() {
            0 => 0,
            span => (height.max(1) - 1) / span,
        }
    }
}

/// A member's signed claim about the output of its dynasty's beacon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedNote {
    pub dynasty_id: u64,
    pub seed: Digest256,
    pub member: PublicKey,
    pub signature: Signature,
}

fn seed_note_bytes(dynasty_id: u64, seed: &Digest256) -> Vec<u8> {
    let mut w = Writer::with_capacity(48);
    w.fixed(b"seed").u64(dynasty_id).fixed(&seed.0);
    w.finish()
}

impl SeedNote {
    pub fn new(keys: &KeyPair, dynasty_id: u64, seed: Digest256) -> Self {
        let signature = keys.sign(&seed_note_bytes(dynasty_id, &seed));
        Self {
            dynasty_id,
            seed,
            member: keys.public(),
            signature,
        }
    }

    pub fn verify(&self) -> bool {
        verify(
            &self.member,
            &seed_note_bytes(self.dynasty_id, &self.seed),
            &self.signature,
        )
    }
}

#[derive(Debug, Clone)]
pub enum MicroMessage {
    Tx(Transaction),
    Block(Block),
    Vote(Vote),
    Share(RandShareMsg),
    Seed(SeedNote),
    /// Asks a peer for a block by hash.
    Fetch(Digest256),
}

impl Message for MicroMessage {
    fn tag(&self) -> u8 {
        match self {
            MicroMessage::Tx(_) => 0x60,
            MicroMessage::Block(_) => 0x61,
            MicroMessage::Vote(_) => 0x62,
            MicroMessage::Share(m) => m.tag(),
            MicroMessage::Seed(_) => 0x65,
            MicroMessage::Fetch(_) => 0x66,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            MicroMessage::Tx(_) => "tx",
            MicroMessage::Block(_) => "block",
            MicroMessage::Vote(_) => "vote",
            MicroMessage::Share(m) => m.kind(),
            MicroMessage::Seed(_) => "seed",
            MicroMessage::Fetch(_) => "fetch",
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.tag());
        match self {
            MicroMessage::Tx(tx) => tx.encode_into(&mut w),
            MicroMessage::Block(b) => b.encode_into(&mut w),
            MicroMessage::Vote(v) => v.encode_into(&mut w),
            MicroMessage::Share(m) => m.encode_into(&mut w),
            MicroMessage::Seed(n) => {
                w.u64(n.dynasty_id)
                    .fixed(&n.seed.0)
                    .fixed(&n.member.0)
                    .bytes(&n.signature.0);
            }
            MicroMessage::Fetch(h) => {
                w.fixed(&h.0);
            }
        }
        w.finish()
    }

    fn wire_len(&self) -> usize {
        match self {
            MicroMessage::Tx(tx) => 1 + tx.encoded_len(),
            MicroMessage::Block(b) => 1 + b.encoded_len(),
            _ => self.encode().len(),
        }
    }
}

/// Validator keys everyone can draw sortition tickets from. Stands in for
/// the public board where each validator posts its own ticket.
#[derive(Debug)]
struct Roster {
    keys: Vec<KeyPair>,
    node_of: BTreeMap<PublicKey, NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub node: NodeId,
    pub epoch: u64,
    pub first: Checkpoint,
    pub second: Checkpoint,
    pub votes: Vec<Vote>,
    pub evidence: Vec<EquivocationEvidence>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorStats {
    pub proposed: u64,
    pub votes_cast: u64,
    pub evaluations: u64,
    /// Second eligibility evaluations attempted within one slot.
    pub grinding_attempts: u64,
    pub rejected: BTreeMap<String, u64>,
}

pub struct Validator {
    pub index: NodeId,
    keys: KeyPair,
    pub pk: PublicKey,
    pub fault: ValidatorFault,
    params: Arc<MicrochainParams>,
    roster: Arc<Roster>,
    pub tree: ForkTree,
    pub dynasties: BTreeMap<u64, Dynasty>,
    pub ledger: CreditLedger,
    proposer: PocProposer,
    mempool: BTreeMap<Digest256, Transaction>,
    seen_tx: BTreeSet<Digest256>,
    by_slot: BTreeMap<(PublicKey, u64), Digest256>,
    orphans: BTreeMap<Digest256, Vec<Block>>,
    fetched: BTreeSet<Digest256>,
    awaiting_dynasty: BTreeMap<u64, Vec<(Option<NodeId>, Block)>>,
    vote_backlog: BTreeMap<u64, Vec<Vote>>,
    votes: BTreeMap<u64, Vec<Vote>>,
    voted: BTreeSet<(u64, Digest256)>,
    pending_final: BTreeMap<u64, Checkpoint>,
    /// Checkpoint this node saw finalized, per epoch.
    pub finalized: BTreeMap<u64, Checkpoint>,
    rewarded_height: u64,
    vote_rewarded: BTreeSet<u64>,
    vote_evidence: BTreeMap<PublicKey, EquivocationEvidence>,
    proposer_evidence: BTreeSet<PublicKey>,
    slashed: BTreeSet<PublicKey>,
    sessions: BTreeMap<u64, RandShareSession>,
    /// Seed that selects dynasty `j`, keyed by `j`.
    seeds: BTreeMap<u64, Digest256>,
    seed_notes: BTreeMap<u64, BTreeMap<PublicKey, Digest256>>,
    pub conflict: Option<ConflictRecord>,
    pub stats: ValidatorStats,
}

impl Validator {
    fn new(
        index: NodeId,
        keys: KeyPair,
        fault: ValidatorFault,
        params: Arc<MicrochainParams>,
        roster: Arc<Roster>,
        tree: ForkTree,
        dynasty: Dynasty,
    ) -> Self {
        let ledger = CreditLedger::new(dynasty.members.iter().map(|m| (m.pk, m.credit)));
        Self {
            index,
            pk: keys.public(),
            proposer: PocProposer::new(keys.clone()),
            keys,
            fault,
            params,
            roster,
            tree,
            dynasties: BTreeMap::from([(0, dynasty)]),
            ledger,
            mempool: BTreeMap::new(),
            seen_tx: BTreeSet::new(),
            by_slot: BTreeMap::new(),
            orphans: BTreeMap::new(),
            fetched: BTreeSet::new(),
            awaiting_dynasty: BTreeMap::new(),
            vote_backlog: BTreeMap::new(),
            votes: BTreeMap::new(),
            voted: BTreeSet::new(),
            pending_final: BTreeMap::new(),
            finalized: BTreeMap::new(),
            rewarded_height: 0,
            vote_rewarded: BTreeSet::new(),
            vote_evidence: BTreeMap::new(),
            proposer_evidence: BTreeSet::new(),
            slashed: BTreeSet::new(),
            sessions: BTreeMap::new(),
            seeds: BTreeMap::from([(0, Digest256::ZERO)]),
            seed_notes: BTreeMap::new(),
            conflict: None,
            stats: ValidatorStats::default(),
        }
    }

    pub fn finalized_height(&self) -> u64 {
        self.tree.finalized_height()
    }

    /// Blocks from genesis to the finalized checkpoint.
    pub fn finalized_chain(&self) -> Vec<Block> {
        self.tree
            .chain_to(&self.tree.finalized())
            .iter()
            .filter_map(|h| self.tree.get(h).cloned())
            .collect()
    }

    /// Blocks from genesis to the fork-choice head.
    pub fn head_chain(&self) -> Vec<Block> {
        self.tree
            .chain_to(&self.tree.longest_chain_head())
            .iter()
            .filter_map(|h| self.tree.get(h).cloned())
            .collect()
    }

    fn slot(&self, ctx: &Context<'_, MicroMessage>) -> u64 {
        ctx.now() / self.params.slot_ms
    }

    fn reject(&mut self, ctx: &mut Context<'_, MicroMessage>, reason: &str) {
        *self.stats.rejected.entry(reason.to_string()).or_default() += 1;
        ctx.mark("reject", format!("reason={reason}"));
    }

    fn current_dynasty(&self) -> Option<&Dynasty> {
        let head = self.tree.longest_chain_head();
        let next = self.tree.height_of(&head).unwrap_or(0) + 1;
        self.dynasties.get(&self.params.dynasty_of_height(next))
    }

    // ---- slot work ----

    fn on_slot(&mut self, ctx: &mut Context<'_, MicroMessage>) {
        if self.fault == ValidatorFault::Silent || self.conflict.is_some() {
            return;
        }
        self.vote_step(ctx);
        self.propose_step(ctx);
    }

    fn vote_step(&mut self, ctx: &mut Context<'_, MicroMessage>) {
        let slot = self.slot(ctx);
        let e = self.params.epoch_length;
        let head = self.tree.longest_chain_head();
        let head_height = self.tree.height_of(&head).unwrap_or(0);
        for epoch in self.tree.finalized_height() / e + 1..=head_height / e {
            let height = epoch * e;
            let Some(d) = self.dynasties.get(&self.params.dynasty_of_height(height)) else {
                continue;
            };
            if !d.is_member(&self.pk) {
                continue;
            }
            let dynasty_id = d.id;
            let candidates: Vec<Digest256> = if self.fault.is_byzantine() {
                self.tree
                    .blocks()
                    .filter(|(_, b)| b.header.height == height)
                    .map(|(h, _)| *h)
                    .collect()
            } else if self
                .voted
                .range((epoch, Digest256::ZERO)..=(epoch, Digest256([0xff; 32])))
                .next()
                .is_some()
            {
                continue;
            } else {
                self.tree.ancestor_at(&head, height).into_iter().collect()
            };
            for block_hash in candidates {
                let settled = self
                    .tree
                    .get(&block_hash)
                    .is_some_and(|b| b.header.slot < slot);
                if !settled || !self.voted.insert((epoch, block_hash)) {
                    continue;
                }
                let vote = Vote::new(
                    &self.keys,
                    Checkpoint {
                        block_hash,
                        epoch,
                        height,
                    },
                    dynasty_id,
                );
                self.stats.votes_cast += 1;
                ctx.mark(
                    "vote_cast",
                    format!("epoch={epoch} block={}", block_hash.short()),
                );
                ctx.broadcast(MicroMessage::Vote(vote.clone()));
                self.accept_vote(ctx, vote);
                if self.conflict.is_some() {
                    return;
                }
            }
        }
    }

    fn propose_step(&mut self, ctx: &mut Context<'_, MicroMessage>) {
        let slot = self.slot(ctx);
        let now = ctx.now();
        let head = self.tree.longest_chain_head();
        let Some(parent) = self.tree.get(&head).cloned() else {
            return;
        };
        let Some(dynasty) = self
            .dynasties
            .get(&self.params.dynasty_of_height(parent.header.height + 1))
            .cloned()
        else {
            return;
        };
        if !dynasty.is_member(&self.pk) {
            return;
        }
        let pending: Vec<Transaction> = self.mempool.values().cloned().collect();
        let block_bytes = self.params.block_bytes;
        let keys = &self.keys;
        let made = self
            .proposer
            .try_propose_with(&parent, slot, &dynasty, self.params.rho, || {
                block_transactions(keys, pending, block_bytes, now)
            });
        self.stats.evaluations = self.proposer.evaluations;
        self.stats.grinding_attempts = self.proposer.violations;
        let Ok(Some(block)) = made else { return };
        self.stats.proposed += 1;
        let h = block.hash();
        ctx.mark(
            "propose",
            format!(
                "block={} height={} slot={slot} bytes={}",
                h.short(),
                block.header.height,
                block.payload_bytes()
            ),
        );
        if self.fault.is_byzantine() {
            let twin = Block::build(
                &self.keys,
                BlockTemplate {
                    height: block.header.height,
                    prev_hash: block.header.prev_hash,
                    slot,
                    dynasty_id: block.header.dynasty_id,
                    proposer_credit: block.header.proposer_credit,
                    nonce: 1,
                },
                block.transactions.to_vec(),
            );
            let others: Vec<NodeId> = (0..ctx.node_count()).filter(|&i| i != ctx.me()).collect();
            let (left, right) = others.split_at(others.len() / 2);
            ctx.multicast(left, MicroMessage::Block(block.clone()));
            ctx.multicast(right, MicroMessage::Block(twin.clone()));
            self.adopt_own(twin);
        } else {
            ctx.broadcast(MicroMessage::Block(block.clone()));
        }
        self.adopt_own(block);
    }

    fn adopt_own(&mut self, block: Block) {
        self.by_slot
            .insert((block.header.proposer_pk, block.header.slot), block.hash());
        for tx in block.transactions.iter() {
            self.mempool.remove(&tx.id);
        }
        let _ = self.tree.insert_validated(block);
    }

    fn submit_probe(&mut self, ctx: &mut Context<'_, MicroMessage>) {
        let slot = self.slot(ctx);
        let mut payload = format!("probe:{}:{slot}", self.index).into_bytes();
        payload.resize(self.params.tx_bytes.max(payload.len()), 0);
        let tx = Transaction::new_signed(&self.keys, payload, ctx.now());
        ctx.mark("tx_submit", format!("tx={} slot={slot}", tx.id.short()));
        self.seen_tx.insert(tx.id);
        self.mempool.insert(tx.id, tx.clone());
        ctx.broadcast(MicroMessage::Tx(tx));
    }

    fn probe_due(&self, slot: u64) -> bool {
        let e = self.params.epoch_length;
        self.params.probe_txs
            && self.fault != ValidatorFault::Silent
            && slot >= 1
            && (slot - 1) % e == 0
            && ((slot - 1) / e) as usize % self.roster.keys.len() == self.index
            && self
                .current_dynasty()
                .is_some_and(|d| d.is_member(&self.pk))
    }

    // ---- blocks ----

    fn receive_block(
        &mut self,
        ctx: &mut Context<'_, MicroMessage>,
        from: Option<NodeId>,
        block: Block,
    ) {
        let slot = self.slot(ctx);
        let mut queue = vec![(from, block)];
        while let Some((from, b)) = queue.pop() {
            let h = b.hash();
            if self.tree.contains(&h) {
                continue;
            }
            if b.is_genesis() {
                self.reject(ctx, "foreign-genesis");
                continue;
            }
            let dynasty_id = self.params.dynasty_of_height(b.header.height);
            if b.header.dynasty_id != dynasty_id {
                self.reject(ctx, "wrong-dynasty");
                continue;
            }
            let Some(d) = self.dynasties.get(&dynasty_id) else {
                self.awaiting_dynasty
                    .entry(dynasty_id)
                    .or_default()
                    .push((from, b));
                continue;
            };
            match verify_block_poc(&b, d, &self.tree, slot, self.params.rho) {
                Ok(()) => {}
                Err(PocReject::UnknownParent) => {
                    let parent = b.header.prev_hash;
                    if b.header.height <= self.tree.finalized_height() {
                        self.reject(ctx, "below-finalized");
                        continue;
                    }
                    let waiting = self.orphans.entry(parent).or_default();
                    if !waiting.iter().any(|o| o.hash() == h) {
                        waiting.push(b);
                    }
                    if let Some(peer) = from {
                        if self.fetched.insert(parent) {
                            ctx.send(peer, MicroMessage::Fetch(parent));
                        }
                    }
                    continue;
                }
                Err(r) => {
                    self.reject(ctx, r.reason());
                    continue;
                }
            }
            match self.tree.insert_validated(b.clone()) {
                Ok(InsertOutcome::Attached(_)) => {}
                Ok(_) => continue,
                Err(_) => {
                    self.reject(ctx, "below-finalized");
                    continue;
                }
            }
            let key = (b.header.proposer_pk, b.header.slot);
            match self.by_slot.get(&key) {
                Some(other) if *other != h => {
                    if self.proposer_evidence.insert(key.0) {
                        ctx.mark("proposer_equivocation", format!("slot={}", key.1));
                    }
                }
                _ => {
                    self.by_slot.insert(key, h);
                }
            }
            for tx in b.transactions.iter() {
                self.mempool.remove(&tx.id);
            }
            ctx.mark(
                "verified",
                format!("block={} height={}", h.short(), b.header.height),
            );
            if let Some(kids) = self.orphans.remove(&h) {
                queue.extend(kids.into_iter().map(|k| (from, k)));
            }
        }
        let ready: Vec<Checkpoint> = self
            .pending_final
            .values()
            .filter(|c| self.tree.contains(&c.block_hash))
            .copied()
            .collect();
        for c in ready {
            self.pending_final.remove(&c.epoch);
            self.try_finalize(ctx, c);
        }
    }

    // ---- votes and finality ----

    fn accept_vote(&mut self, ctx: &mut Context<'_, MicroMessage>, vote: Vote) {
        let e = self.params.epoch_length;
        let c = vote.checkpoint;
        if c.epoch == 0 || c.height != c.epoch * e {
            self.reject(ctx, "bad-checkpoint");
            return;
        }
        let dynasty_id = self.params.dynasty_of_height(c.height);
        let Some(d) = self.dynasties.get(&dynasty_id) else {
            self.vote_backlog.entry(dynasty_id).or_default().push(vote);
            return;
        };
        if vote.dynasty_id != d.id || !d.is_member(&vote.voter) {
            self.reject(ctx, "vote-not-member");
            return;
        }
        let list = self.votes.entry(c.epoch).or_default();
        if list.contains(&vote) {
            return;
        }
        if let Some(first) = list
            .iter()
            .find(|o| o.voter == vote.voter && o.checkpoint != c)
        {
            if !self.vote_evidence.contains_key(&vote.voter) {
                let ev = EquivocationEvidence::new(first.clone(), vote.clone())
                    .expect("same voter, same epoch");
                self.vote_evidence.insert(vote.voter, ev);
                ctx.mark("vote_equivocation", format!("epoch={}", c.epoch));
            }
        }
        list.push(vote);
        let report = tally_checked(list, d);
        match report.outcome {
            TallyOutcome::Conflict { first, second } => {
                self.raise_conflict(ctx, first.epoch, first, second)
            }
            TallyOutcome::Finalized(cp) => self.try_finalize(ctx, cp),
            TallyOutcome::Pending => {}
        }
    }

    fn finalized_checkpoint_at(&self, height: u64) -> Checkpoint {
        let e = self.params.epoch_length;
        let block_hash = self
            .tree
            .ancestor_at(&self.tree.finalized(), height)
            .unwrap_or(Digest256::ZERO);
        Checkpoint {
            block_hash,
            epoch: height / e,
            height,
        }
    }

    fn try_finalize(&mut self, ctx: &mut Context<'_, MicroMessage>, c: Checkpoint) {
        if self.conflict.is_some() {
            return;
        }
        if let Some(prev) = self.finalized.get(&c.epoch) {
            if *prev != c {
                let prev = *prev;
                self.raise_conflict(ctx, c.epoch, prev, c);
            }
            return;
        }
        let fin_height = self.tree.finalized_height();
        if !self.tree.contains(&c.block_hash) {
            if c.height <= fin_height {
                let ours = self.finalized_checkpoint_at(c.height);
                self.raise_conflict(ctx, c.epoch, ours, c);
            } else {
                self.pending_final.insert(c.epoch, c);
            }
            return;
        }
        if c.height <= fin_height {
            if self.tree.is_ancestor(&c.block_hash, &self.tree.finalized()) {
                self.record_finalized(ctx, c);
            } else {
                let ours = self.finalized_checkpoint_at(c.height);
                self.raise_conflict(ctx, c.epoch, ours, c);
            }
            return;
        }
        match self.tree.finalize(&c) {
            Ok(_) => {
                self.record_finalized(ctx, c);
                self.after_finality(ctx, c);
            }
            Err(FinalizeError::SafetyViolation { .. }) => {
                let ours = self.finalized_checkpoint_at(fin_height);
                self.raise_conflict(ctx, c.epoch, ours, c);
            }
            Err(_) => self.reject(ctx, "bad-checkpoint"),
        }
    }

    fn record_finalized(&mut self, ctx: &mut Context<'_, MicroMessage>, c: Checkpoint) {
        self.finalized.insert(c.epoch, c);
        self.pending_final.remove(&c.epoch);
        ctx.mark(
            "finalize",
            format!(
                "epoch={} height={} block={}",
                c.epoch,
                c.height,
                c.block_hash.short()
            ),
        );
    }

    fn raise_conflict(
        &mut self,
        ctx: &mut Context<'_, MicroMessage>,
        epoch: u64,
        first: Checkpoint,
        second: Checkpoint,
    ) {
        if self.conflict.is_some() {
            return;
        }
        let votes = self.votes.get(&epoch).cloned().unwrap_or_default();
        let evidence = self.vote_evidence.values().cloned().collect();
        self.conflict = Some(ConflictRecord {
            node: self.index,
            epoch,
            first,
            second,
            votes,
            evidence,
        });
        ctx.mark(
            "conflict",
            format!(
                "epoch={epoch} first={} second={}",
                first.block_hash.short(),
                second.block_hash.short()
            ),
        );
        ctx.halt(format!(
            "conflicting checkpoints finalized for epoch {epoch}"
        ));
    }

    /// Rewards and penalties for the newly finalized stretch, then a possible
    /// dynasty change. Vote rewards for an epoch are paid at the next
    /// finalization so that every honest node has seen the same votes.
    fn after_finality(&mut self, ctx: &mut Context<'_, MicroMessage>, c: Checkpoint) {
        let chain = self.tree.chain_to(&c.block_hash);
        let mut events = EpochEvents {
            slot: self.tree.get(&c.block_hash).map_or(0, |b| b.header.slot),
            ..Default::default()
        };
        for h in chain.iter().skip(self.rewarded_height as usize + 1) {
            if let Some(b) = self.tree.get(h) {
                events.finalized_proposers.push(b.header.proposer_pk);
            }
        }
        self.rewarded_height = c.height;
        let earlier: Vec<(u64, Checkpoint)> = self
            .finalized
            .range(..c.epoch)
            .filter(|(e, _)| !self.vote_rewarded.contains(e))
            .map(|(e, cp)| (*e, *cp))
            .collect();
        for (epoch, cp) in earlier {
            self.vote_rewarded.insert(epoch);
            let voters: BTreeSet<PublicKey> = self
                .votes
                .get(&epoch)
                .into_iter()
                .flatten()
                .filter(|v| v.checkpoint == cp && !self.vote_evidence.contains_key(&v.voter))
                .map(|v| v.voter)
                .collect();
            events.correct_voters.extend(voters);
        }
        for pk in self.vote_evidence.keys() {
            if self.slashed.insert(*pk) {
                events.equivocators.push(*pk);
            }
        }
        for pk in &self.proposer_evidence {
            if self.slashed.insert(*pk) {
                events.grinders.push(*pk);
            }
        }
        if !events.is_empty() {
            let ledger = std::mem::take(&mut self.ledger);
            self.ledger = apply_incentives(ledger, &events, &self.params.incentives);
        }
        let span = self.params.dynasty_span();
        if span > 0 && c.height % span == 0 {
            self.try_rotate(ctx, c.height / span);
        }
    }

    // ---- dynasties ----

    fn try_rotate(&mut self, ctx: &mut Context<'_, MicroMessage>, next: u64) {
        let span = self.params.dynasty_span();
        if span == 0
            || self.dynasties.contains_key(&next)
            || self.tree.finalized_height() < next * span
        {
            return;
        }
        let Some(seed) = self.seeds.get(&next).copied() else {
            return;
        };
        let tickets: Vec<_> = self
            .roster
            .keys
            .iter()
            .map(|k| draw_ticket(k, self.ledger.credit(&k.public()), &seed, next))
            .collect();
        let eligible = tickets.iter().filter(|t| t.credit > 0).count();
        let k = match self.params.committee_size {
            0 => eligible,
            k => k.min(eligible),
        };
        match select_committee(&tickets, &seed, next, k, next * span + 1) {
            Ok(d) => self.install_dynasty(ctx, d),
            Err(e) => ctx.mark("rotation_failed", format!("dynasty={next} error={e}")),
        }
    }

    fn install_dynasty(&mut self, ctx: &mut Context<'_, MicroMessage>, d: Dynasty) {
        let id = d.id;
        ctx.mark(
            "dynasty",
            format!("id={id} k={} seed={}", d.k(), d.seed.short()),
        );
        self.dynasties.insert(id, d);
        self.start_session(ctx, id);
        for (from, b) in self.awaiting_dynasty.remove(&id).unwrap_or_default() {
            self.receive_block(ctx, from, b);
        }
        for v in self.vote_backlog.remove(&id).unwrap_or_default() {
            self.accept_vote(ctx, v);
        }
    }

    fn start_session(&mut self, ctx: &mut Context<'_, MicroMessage>, dynasty_id: u64) {
        if self.params.dynasty_span() == 0 {
            return;
        }
        let d = &self.dynasties[&dynasty_id];
        let Some(mut session) = RandShareSession::new(d, &self.pk, default_threshold(d.k())) else {
            return;
        };
        if self.fault != ValidatorFault::Silent {
            let members: Vec<PublicKey> = d.members.iter().map(|m| m.pk).collect();
            for (i, msg) in session.deal(ctx.rng()) {
                ctx.send(self.roster.node_of[&members[i]], MicroMessage::Share(msg));
            }
        }
        self.sessions.insert(dynasty_id, session);
        ctx.set_timer(self.params.randshare_window_ms, REVEAL_TIMER | dynasty_id);
    }

    fn reveal(&mut self, ctx: &mut Context<'_, MicroMessage>, dynasty_id: u64) {
        let silent = self.fault == ValidatorFault::Silent;
        let Some(session) = self.sessions.get_mut(&dynasty_id) else {
            return;
        };
        if session.status() != RandShareStatus::Dealing {
            return;
        }
        if silent {
            session.withhold();
        } else {
            let msg = session.reveal();
            ctx.broadcast(MicroMessage::Share(msg));
        }
        ctx.set_timer(self.params.randshare_window_ms, FINISH_TIMER | dynasty_id);
    }

    fn finish_session(&mut self, ctx: &mut Context<'_, MicroMessage>, dynasty_id: u64) {
        let prev = self
            .dynasties
            .get(&dynasty_id)
            .map_or(Digest256::ZERO, |d| d.seed);
        let Some(session) = self.sessions.get_mut(&dynasty_id) else {
            return;
        };
        if session.status() == RandShareStatus::Complete {
            return;
        }
        if session.status() == RandShareStatus::Dealing {
            session.withhold();
        }
        let out = session.finish(&prev).clone();
        ctx.mark(
            "randshare",
            format!(
                "dynasty={dynasty_id} output={} fallback={}",
                out.output.short(),
                out.fallback
            ),
        );
        self.seeds.entry(dynasty_id + 1).or_insert(out.output);
        if self.fault != ValidatorFault::Silent {
            ctx.broadcast(MicroMessage::Seed(SeedNote::new(
                &self.keys, dynasty_id, out.output,
            )));
        }
        self.try_rotate(ctx, dynasty_id + 1);
    }

    /// Validators outside a dynasty learn its beacon output from enough
    /// matching signed notes.
    fn receive_seed(&mut self, ctx: &mut Context<'_, MicroMessage>, note: SeedNote) {
        if !note.verify() {
            self.reject(ctx, "bad-seed-note");
            return;
        }
        let j = note.dynasty_id;
        self.seed_notes
            .entry(j)
            .or_default()
            .insert(note.member, note.seed);
        if self.seeds.contains_key(&(j + 1)) {
            return;
        }
        let Some(d) = self.dynasties.get(&j) else {
            return;
        };
        let agreeing = self.seed_notes[&j]
            .iter()
            .filter(|(pk, s)| d.is_member(pk) && **s == note.seed)
            .count();
        if agreeing >= default_threshold(d.k()) {
            self.seeds.insert(j + 1, note.seed);
            self.try_rotate(ctx, j + 1);
        }
    }

    fn arm_timers(&self, ctx: &mut Context<'_, MicroMessage>) {
        let slot_ms = self.params.slot_ms;
        let to_next = slot_ms - ctx.now() % slot_ms;
        ctx.set_timer(to_next, SLOT_TIMER);
        let half = slot_ms / 2;
        let to_probe = if ctx.now() % slot_ms < half {
            half - ctx.now() % slot_ms
        } else {
            to_next + half
        };
        ctx.set_timer(to_probe, PROBE_TIMER);
    }
}

fn block_transactions(
    keys: &KeyPair,
    mut txs: Vec<Transaction>,
    block_bytes: usize,
    now: u64,
) -> Vec<Transaction> {
    let carried: usize = txs.iter().map(|t| t.payload.len()).sum();
    let filler = block_bytes.saturating_sub(carried);
    if filler > 0 {
        let payload: Vec<u8> = (0..filler).map(|i| (i % 251) as u8).collect();
        txs.push(Transaction::new_signed(keys, payload, now));
    }
    txs
}

impl Node for Validator {
    type Msg = MicroMessage;

    fn on_start(&mut self, ctx: &mut Context<'_, MicroMessage>) {
        self.arm_timers(ctx);
        self.start_session(ctx, 0);
    }

    fn on_message(&mut self, ctx: &mut Context<'_, MicroMessage>, from: NodeId, msg: MicroMessage) {
        if self.conflict.is_some() {
            return;
        }
        match msg {
            MicroMessage::Tx(tx) => {
                if !self.seen_tx.insert(tx.id) {
                    return;
                }
                if !tx.is_well_formed() || tx.is_system() {
                    self.reject(ctx, "bad-tx");
                    return;
                }
                ctx.mark("tx_recv", format!("tx={}", tx.id.short()));
                self.mempool.insert(tx.id, tx);
            }
            MicroMessage::Block(b) => self.receive_block(ctx, Some(from), b),
            MicroMessage::Vote(v) => {
                if v.verify() {
                    self.accept_vote(ctx, v);
                } else {
                    self.reject(ctx, "bad-vote-signature");
                }
            }
            MicroMessage::Share(m) => {
                if let Some(s) = self.sessions.get_mut(&m.dynasty_id()) {
                    s.on_message(&m);
                }
            }
            MicroMessage::Seed(note) => self.receive_seed(ctx, note),
            MicroMessage::Fetch(h) => {
                if let Some(b) = self.tree.get(&h) {
                    ctx.send(from, MicroMessage::Block(b.clone()));
                }
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, MicroMessage>, timer: u64) {
        match (timer & TIMER_KIND_MASK, timer & !TIMER_KIND_MASK) {
            (0, SLOT_TIMER) => {
                self.on_slot(ctx);
                ctx.set_timer(self.params.slot_ms, SLOT_TIMER);
            }
            (0, PROBE_TIMER) => {
                if self.conflict.is_none() && self.probe_due(self.slot(ctx)) {
                    self.submit_probe(ctx);
                }
                ctx.set_timer(self.params.slot_ms, PROBE_TIMER);
            }
            (REVEAL_TIMER, j) => self.reveal(ctx, j),
            (FINISH_TIMER, j) => self.finish_session(ctx, j),
            _ => {}
        }
    }

    fn on_recover(&mut self, ctx: &mut Context<'_, MicroMessage>) {
        self.arm_timers(ctx);
        let open: Vec<u64> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.status() != RandShareStatus::Complete)
            .map(|(j, _)| *j)
            .collect();
        for j in open {
            self.finish_session(ctx, j);
        }
    }

    fn snapshot(&self) -> Option<String> {
        Some(format!(
            "head={} finalized={} dynasties={}",
            self.tree
                .height_of(&self.tree.longest_chain_head())
                .unwrap_or(0),
            self.tree.finalized_height(),
            self.dynasties.len()
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrochainScenario {
    pub validators: Vec<ValidatorSpec>,
    pub params: MicrochainParams,
    pub model: NetworkModel,
    pub slots: u64,
    pub trace_level: TraceLevel,
}

impl MicrochainScenario {
    /// Honest validators with the given credits and seeds `1000 + i`.
    pub fn honest(
        credits: &[u64],
        params: MicrochainParams,
        model: NetworkModel,
        slots: u64,
    ) -> Self {
        let validators = credits
            .iter()
            .enumerate()
            .map(|(i, &c)| ValidatorSpec::honest(1000 + i as u64, c))
            .collect();
        Self {
            validators,
            params,
            model,
            slots,
            trace_level: TraceLevel::MarksOnly,
        }
    }

    pub fn with_fault(mut self, index: usize, fault: ValidatorFault) -> Self {
        self.validators[index].fault = fault;
        self
    }
}

pub struct MicrochainReport {
    pub validators: Vec<Validator>,
    pub halted: Option<Halt>,
    pub conflict: Option<ConflictRecord>,
    pub messages: u64,
    pub sent_by_kind: BTreeMap<&'static str, u64>,
    pub end_time: u64,
    pub trace: Trace,
    pub params: MicrochainParams,
}

impl MicrochainReport {
    /// Lowest finalized height among validators that never failed.
    pub fn min_honest_finalized_height(&self) -> u64 {
        self.honest()
            .map(|v| v.finalized_height())
            .min()
            .unwrap_or(0)
    }

    pub fn honest(&self) -> impl Iterator<Item = &Validator> {
        self.validators
            .iter()
            .filter(|v| v.fault == ValidatorFault::Honest)
    }

    /// Epochs in which two validators saw different checkpoints finalized.
    pub fn conflicting_epochs(&self) -> Vec<u64> {
        let mut seen: BTreeMap<u64, Checkpoint> = BTreeMap::new();
        let mut bad = BTreeSet::new();
        for v in &self.validators {
            for (e, c) in &v.finalized {
                if *seen.entry(*e).or_insert(*c) != *c {
                    bad.insert(*e);
                }
            }
        }
        if let Some(c) = &self.conflict {
            bad.insert(c.epoch);
        }
        bad.into_iter().collect()
    }
}

pub fn microchain_run(
    scenario: &MicrochainScenario,
    seed: u64,
) -> Result<MicrochainReport, MicrochainError> {
    let params = Arc::new(scenario.params.clone());
    params.validate()?;
    scenario
        .model
        .synchrony
        .validate()
        .map_err(MicrochainError::Sim)?;
    let keys: Vec<KeyPair> = scenario
        .validators
        .iter()
        .map(|v| KeyPair::from_seed(v.seed))
        .collect();
    let initial: Vec<(PublicKey, u64)> = keys
        .iter()
        .zip(&scenario.validators)
        .map(|(k, v)| (k.public(), v.credit))
        .collect();
    let (_, tree, dynasty) = genesis_init(&initial, params.epoch_length)?;
    let roster = Arc::new(Roster {
        node_of: keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.public(), i))
            .collect(),
        keys: keys.clone(),
    });
    let mut adversary = AdversarySpec::honest();
    for (i, v) in scenario.validators.iter().enumerate() {
        if let ValidatorFault::Crash { at_ms, recover_ms } = v.fault {
            adversary = adversary.with(
                i,
                Behavior::Crash {
                    at: at_ms,
                    recover_at: recover_ms,
                },
            );
        }
    }
    let nodes: Vec<Validator> = keys
        .into_iter()
        .zip(&scenario.validators)
        .enumerate()
        .map(|(i, (k, v))| {
            Validator::new(
                i,
                k,
                v.fault,
                params.clone(),
                roster.clone(),
                tree.clone(),
                dynasty.clone(),
            )
        })
        .collect();
    let mut sim = Simulation::new(nodes, scenario.model.clone(), adversary, seed)
        .with_trace_level(scenario.trace_level);
    let until = (scenario.slots + 1) * params.slot_ms - 1;
    let outcome = sim
        .run(Some(until))
        .map_err(|e| MicrochainError::Sim(e.to_string()))?;
    let messages = sim.stats().sent;
    let sent_by_kind = sim.stats().sent_by_kind.clone();
    let (validators, trace) = sim.into_parts();
    let conflict = validators.iter().find_map(|v| v.conflict.clone());
    Ok(MicrochainReport {
        validators,
        halted: outcome.halted,
        conflict,
        messages,
        sent_by_kind,
        end_time: outcome.end_time,
        trace,
        params: scenario.params.clone(),
    })
}

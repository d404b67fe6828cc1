use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dynasty, MicrochainError};
use crate::codec::Writer;
use crate::crypto::{
    hash, hash_parts, pvss_deal, pvss_recover, share_matches, Digest256, PublicKey, PvssShare,
};
use crate::netsim::{AdversarySpec, Context, Message, NetworkModel, Node, NodeId, Simulation};

/// `floor(2K/3) + 1`.
pub fn default_threshold(k: usize) -> usize {
    2 * k / 3 + 1
}

/// Seed used when a session cannot produce randomness.
pub fn fallback_seed(seed: &Digest256) -> Digest256 {
    hash_parts(&[&seed.0, b"fallback"])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RandShareMsg {
    /// One recipient's share of the dealer's secret, with the commitments to all shares.
    Deal {
        dynasty_id: u64,
        dealer: PublicKey,
        commitments: Vec<Digest256>,
        share: PvssShare,
    },
    /// Every share the revealer holds, keyed by dealer.
    Reveal {
        dynasty_id: u64,
        revealer: PublicKey,
        shares: Vec<(PublicKey, PvssShare)>,
    },
}

impl RandShareMsg {
    pub fn encode_into(&self, w: &mut Writer) {
        match self {
            RandShareMsg::Deal {
                dynasty_id,
                dealer,
                commitments,
                share,
            } => {
                w.u64(*dynasty_id)
                    .fixed(&dealer.0)
                    .u32(commitments.len() as u32);
                for c in commitments {
                    w.fixed(&c.0);
                }
                w.u32(share.index).bytes(&share.value);
            }
            RandShareMsg::Reveal {
                dynasty_id,
                revealer,
                shares,
            } => {
                w.u64(*dynasty_id)
                    .fixed(&revealer.0)
                    .u32(shares.len() as u32);
                for (dealer, s) in shares {
                    w.fixed(&dealer.0).u32(s.index).bytes(&s.value);
                }
            }
        }
    }

    pub fn dynasty_id(&self) -> u64 {
        match self {
            RandShareMsg::Deal { dynasty_id, .. } | RandShareMsg::Reveal { dynasty_id, .. } => {
                *dynasty_id
            }
        }
    }
}

impl Message for RandShareMsg {
    fn tag(&self) -> u8 {
        match self {
            RandShareMsg::Deal { .. } => 0x63,
            RandShareMsg::Reveal { .. } => 0x64,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            RandShareMsg::Deal { .. } => "deal",
            RandShareMsg::Reveal { .. } => "reveal",
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.tag());
        self.encode_into(&mut w);
        w.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandShareStatus {
    Dealing,
    Revealing,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandShareOutcome {
    pub member: PublicKey,
    pub output: Digest256,
    /// Dealers whose secrets went into the output, in key order.
    pub recovered: Vec<PublicKey>,
    pub fallback: bool,
}

/// One member's view of a session.
#[derive(Debug, Clone)]
pub struct RandShareSession {
    pub dynasty_id: u64,
    members: Vec<PublicKey>,
    me: usize,
    t: usize,
    commitments: BTreeMap<usize, Vec<Digest256>>,
    held: BTreeMap<usize, PvssShare>,
    revealed: BTreeMap<usize, BTreeMap<u32, PvssShare>>,
    status: RandShareStatus,
    outcome: Option<RandShareOutcome>,
    pub rejected: u64,
}

impl RandShareSession {
    /// `None` when `me` is not in the dynasty.
    pub fn new(dynasty: &Dynasty, me: &PublicKey, t: usize) -> Option<Self> {
        let members: Vec<PublicKey> = dynasty.members.iter().map(|m| m.pk).collect();
        let me = members.iter().position(|p| p == me)?;
        Some(Self {
            dynasty_id: dynasty.id,
            members,
            me,
            t: t.clamp(1, dynasty.k()),
            commitments: BTreeMap::new(),
            held: BTreeMap::new(),
            revealed: BTreeMap::new(),
            status: RandShareStatus::Dealing,
            outcome: None,
            rejected: 0,
        })
    }

    pub fn status(&self) -> RandShareStatus {
        self.status
    }

    pub fn outcome(&self) -> Option<&RandShareOutcome> {
        self.outcome.as_ref()
    }

    pub fn threshold(&self) -> usize {
        self.t
    }

    /// Deals a fresh secret. Returns `(recipient index, message)` for every
    /// other member; this member's own share is applied directly.
    pub fn deal<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<(usize, RandShareMsg)> {
        let mut secret = [0u8; 32];
        rng.fill(&mut secret);
        let deal = pvss_deal(&Digest256(secret), self.members.len(), self.t, rng)
            .expect("threshold within committee");
        let dealer = self.members[self.me];
        let mut out = Vec::new();
        for (i, share) in deal.shares.into_iter().enumerate() {
            let msg = RandShareMsg::Deal {
                dynasty_id: self.dynasty_id,
                dealer,
                commitments: deal.commitments.clone(),
                share,
            };
            if i == self.me {
                self.on_message(&msg);
            } else {
                out.push((i, msg));
            }
        }
        out
    }

    /// Ends the dealing phase and reveals every held share.
    pub fn reveal(&mut self) -> RandShareMsg {
        self.status = RandShareStatus::Revealing;
        let shares = self
            .held
            .iter()
            .map(|(d, s)| (self.members[*d], s.clone()))
            .collect();
        let msg = RandShareMsg::Reveal {
            dynasty_id: self.dynasty_id,
            revealer: self.members[self.me],
            shares,
        };
        self.on_message(&msg);
        msg
    }

    /// Moves to the reveal phase without revealing.
    pub fn withhold(&mut self) {
        self.status = RandShareStatus::Revealing;
    }

    pub fn on_message(&mut self, msg: &RandShareMsg) {
        if msg.dynasty_id() != self.dynasty_id || self.status == RandShareStatus::Complete {
            self.rejected += 1;
            return;
        }
        match msg {
            RandShareMsg::Deal {
                dealer,
                commitments,
                share,
                ..
            } => {
                let ok = self.status == RandShareStatus::Dealing
                    && commitments.len() == self.members.len()
                    && share.index as usize == self.me + 1
                    && share_matches(commitments, share);
                match (ok, self.index(dealer)) {
                    (true, Some(d)) if !self.commitments.contains_key(&d) => {
                        self.commitments.insert(d, commitments.clone());
                        self.held.insert(d, share.clone());
                    }
                    _ => self.rejected += 1,
                }
            }
            RandShareMsg::Reveal {
                revealer, shares, ..
            } => {
                let Some(r) = self.index(revealer) else {
                    self.rejected += 1;
                    return;
                };
                for (dealer, share) in shares {
                    let valid = self.index(dealer).filter(|d| {
                        share.index as usize == r + 1
                            && self
                                .commitments
                                .get(d)
                                .is_some_and(|c| share_matches(c, share))
                    });
                    match valid {
                        Some(d) => {
                            self.revealed
                                .entry(d)
                                .or_default()
                                .insert(share.index, share.clone());
                        }
                        None => self.rejected += 1,
                    }
                }
            }
        }
    }

    fn index(&self, pk: &PublicKey) -> Option<usize> {
        self.members.iter().position(|p| p == pk)
    }

    /// Recovers every dealer's secret that has `t` revealed shares and hashes
    /// them together in key order. Falls back to `fallback_seed(prev_seed)`
    /// when fewer than `t` secrets are recoverable.
    pub fn finish(&mut self, prev_seed: &Digest256) -> &RandShareOutcome {
        if self.outcome.is_none() {
            let mut recovered = Vec::new();
            let mut secrets = Vec::new();
            for (d, shares) in &self.revealed {
                let shares: Vec<PvssShare> = shares.values().cloned().collect();
                if let Ok(secret) = pvss_recover(&shares, self.t) {
                    recovered.push(self.members[*d]);
                    secrets.extend_from_slice(&secret.0);
                }
            }
            let fallback = recovered.len() < self.t;
            let output = if fallback {
                fallback_seed(prev_seed)
            } else {
                hash(&secrets)
            };
            self.outcome = Some(RandShareOutcome {
                member: self.members[self.me],
                output,
                recovered,
                fallback,
            });
            self.status = RandShareStatus::Complete;
        }
        self.outcome.as_ref().expect("set above")
    }
}

/// Settings for a standalone session over the simulated network.
#[derive(Debug, Clone)]
pub struct RandShareRun {
    pub model: NetworkModel,
    /// Length of each of the two phases.
    pub window_ms: u64,
    /// Member indices that deal but never reveal.
    pub withholders: Vec<usize>,
    /// Member indices that neither deal nor reveal.
    pub silent: Vec<usize>,
    pub prev_seed: Digest256,
}

impl RandShareRun {
    pub fn new(model: NetworkModel, window_ms: u64) -> Self {
        Self {
            model,
            window_ms,
            withholders: Vec::new(),
            silent: Vec::new(),
            prev_seed: Digest256::ZERO,
        }
    }
}

struct ShareNode {
    session: RandShareSession,
    window_ms: u64,
    prev_seed: Digest256,
    withhold: bool,
    silent: bool,
}

const REVEAL: u64 = 1;
const FINISH: u64 = 2;

impl Node for ShareNode {
    type Msg = RandShareMsg;

    fn on_start(&mut self, ctx: &mut Context<'_, RandShareMsg>) {
        if !self.silent {
            for (to, msg) in self.session.deal(ctx.rng()) {
                ctx.send(to, msg);
            }
        }
        ctx.set_timer(self.window_ms, REVEAL);
    }

    fn on_message(
        &mut self,
        _ctx: &mut Context<'_, RandShareMsg>,
        _from: NodeId,
        msg: RandShareMsg,
    ) {
        self.session.on_message(&msg);
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, RandShareMsg>, timer: u64) {
        match timer {
            REVEAL => {
                if self.withhold || self.silent {
                    self.session.withhold();
                } else {
                    let msg = self.session.reveal();
                    ctx.broadcast(msg);
                }
                ctx.set_timer(self.window_ms, FINISH);
            }
            FINISH => {
                let out = self.session.finish(&self.prev_seed);
                ctx.mark(
                    "randshare",
                    format!(
                        "output={} recovered={}",
                        out.output.to_hex(),
                        out.recovered.len()
                    ),
                );
            }
            _ => {}
        }
    }
}

/// Runs one session among `dynasty`'s members, node `i` being member `i`.
pub fn run_randshare(
    dynasty: &Dynasty,
    t: usize,
    cfg: &RandShareRun,
    seed: u64,
) -> Result<Vec<RandShareOutcome>, MicrochainError> {
    let nodes: Vec<ShareNode> = dynasty
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| ShareNode {
            session: RandShareSession::new(dynasty, &m.pk, t).expect("member"),
            window_ms: cfg.window_ms,
            prev_seed: cfg.prev_seed,
            withhold: cfg.withholders.contains(&i),
            silent: cfg.silent.contains(&i),
        })
        .collect();
    let mut sim = Simulation::new(nodes, cfg.model.clone(), AdversarySpec::honest(), seed);
    sim.run(None)
        .map_err(|e| MicrochainError::Sim(e.to_string()))?;
    Ok(sim
        .nodes()
        .iter()
        .filter_map(|n| n.session.outcome().cloned())
        .collect())
}

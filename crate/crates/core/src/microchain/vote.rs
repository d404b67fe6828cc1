use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dynasty, MicrochainError};
use crate::codec::{Canonical, CodecError, Reader, Writer};
use crate::crypto::{verify, Digest256, KeyPair, PublicKey, Signature};
use crate::ledger::{Checkpoint, ForkTree};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Vote {
    pub checkpoint: Checkpoint,
    pub voter: PublicKey,
    pub dynasty_id: u64,
    pub signature: Signature,
}

fn signing_bytes(c: &Checkpoint, voter: &PublicKey, dynasty_id: u64) -> Vec<u8> {
    let mut w = Writer::with_capacity(4 + 32 + 16 + 32 + 8);
    w.fixed(b"vote")
        .fixed(&c.block_hash.0)
        .u64(c.epoch)
        .u64(c.height)
        .fixed(&voter.0)
        .u64(dynasty_id);
    w.finish()
}

impl Vote {
    pub fn new(keys: &KeyPair, checkpoint: Checkpoint, dynasty_id: u64) -> Self {
        let voter = keys.public();
        let signature = keys.sign(&signing_bytes(&checkpoint, &voter, dynasty_id));
        Self {
            checkpoint,
            voter,
            dynasty_id,
            signature,
        }
    }

    pub fn verify(&self) -> bool {
        verify(
            &self.voter,
            &signing_bytes(&self.checkpoint, &self.voter, self.dynasty_id),
            &self.signature,
        )
    }
}

impl Canonical for Vote {
    fn encode_into(&self, w: &mut Writer) {
        let c = &self.checkpoint;
        w.fixed(&c.block_hash.0)
            .u64(c.epoch)
            .u64(c.height)
            .fixed(&self.voter.0)
            .u64(self.dynasty_id);
        w.bytes(&self.signature.0);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let checkpoint = Checkpoint {
            block_hash: Digest256(r.array()?),
            epoch: r.u64()?,
            height: r.u64()?,
        };
        Ok(Self {
            checkpoint,
            voter: PublicKey(r.array()?),
            dynasty_id: r.u64()?,
            signature: Signature(r.bytes()?.to_vec()),
        })
    }
}

/// Vote for the checkpoint at the tip of the local fork choice. The tip must
/// sit on an epoch boundary above genesis.
pub fn cast_vote(
    keys: &KeyPair,
    tree: &ForkTree,
    dynasty: &Dynasty,
) -> Result<Vote, MicrochainError> {
    let head = tree.longest_chain_head();
    let height = tree.height_of(&head).unwrap_or(0);
    let epoch_length = tree.epoch_length();
    if height == 0 || height % epoch_length != 0 {
        return Err(MicrochainError::NotAtBoundary {
            height,
            epoch_length,
        });
    }
    let checkpoint = Checkpoint {
        block_hash: head,
        epoch: height / epoch_length,
        height,
    };
    Ok(Vote::new(keys, checkpoint, dynasty.id))
}

/// Two signed votes by one member for different checkpoints of one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivocationEvidence {
    pub voter: PublicKey,
    pub first: Vote,
    pub second: Vote,
}

impl EquivocationEvidence {
    pub fn new(first: Vote, second: Vote) -> Option<Self> {
        let e = Self {
            voter: first.voter,
            first,
            second,
        };
        e.verify().then_some(e)
    }

    pub fn verify(&self) -> bool {
        let (a, b) = (&self.first, &self.second);
        a.voter == self.voter
            && b.voter == self.voter
            && a.dynasty_id == b.dynasty_id
            && a.checkpoint.epoch == b.checkpoint.epoch
            && a.checkpoint != b.checkpoint
            && a.verify()
            && b.verify()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoteReject {
    #[error("voter is not a dynasty member")]
    NotMember,
    #[error("vote signature does not verify")]
    BadSignature,
    #[error("vote names another dynasty")]
    WrongDynasty,
    #[error("repeat of a vote already counted")]
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TallyOutcome {
    Finalized(Checkpoint),
    Pending,
    Conflict {
        first: Checkpoint,
        second: Checkpoint,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TallyReport {
    pub outcome: TallyOutcome,
    /// Index into the input and the reason it was not counted.
    pub discarded: Vec<(usize, VoteReject)>,
    pub evidence: Vec<EquivocationEvidence>,
    /// Credit behind each checkpoint.
    pub weights: BTreeMap<Checkpoint, u64>,
}

/// Strictly more than two thirds of `total`.
pub fn above_two_thirds(weight: u64, total: u64) -> bool {
    3 * weight as u128 > 2 * total as u128
}

pub fn tally_votes(votes: &[Vote], dynasty: &Dynasty) -> TallyReport {
    tally(votes, dynasty, true)
}

/// Tally over votes whose signatures were already checked on arrival.
pub(crate) fn tally_checked(votes: &[Vote], dynasty: &Dynasty) -> TallyReport {
    tally(votes, dynasty, false)
}

fn tally(votes: &[Vote], dynasty: &Dynasty, check_signatures: bool) -> TallyReport {
    let mut discarded = Vec::new();
    let mut seen: BTreeSet<(PublicKey, Checkpoint)> = BTreeSet::new();
    let mut by_voter_epoch: BTreeMap<(PublicKey, u64), Vec<&Vote>> = BTreeMap::new();
    let mut weights: BTreeMap<Checkpoint, u64> = BTreeMap::new();
    for (i, v) in votes.iter().enumerate() {
        let reject = if v.dynasty_id != dynasty.id {
            Some(VoteReject::WrongDynasty)
        } else if !dynasty.is_member(&v.voter) {
            Some(VoteReject::NotMember)
        } else if check_signatures && !v.verify() {
            Some(VoteReject::BadSignature)
        } else if !seen.insert((v.voter, v.checkpoint)) {
            Some(VoteReject::Duplicate)
        } else {
            None
        };
        if let Some(r) = reject {
            discarded.push((i, r));
            continue;
        }
        *weights.entry(v.checkpoint).or_default() += dynasty.credit_of(&v.voter).unwrap_or(0);
        by_voter_epoch
            .entry((v.voter, v.checkpoint.epoch))
            .or_default()
            .push(v);
    }
    let evidence = by_voter_epoch
        .values()
        .filter(|vs| vs.len() > 1)
        .map(|vs| EquivocationEvidence {
            voter: vs[0].voter,
            first: vs[0].clone(),
            second: vs[1].clone(),
        })
        .collect();
    let total = dynasty.total_credit();
    let crossing: Vec<Checkpoint> = weights
        .iter()
        .filter(|(_, &w)| above_two_thirds(w, total))
        .map(|(c, _)| *c)
        .collect();
    let mut outcome = match crossing.iter().max_by_key(|c| c.epoch) {
        Some(c) => TallyOutcome::Finalized(*c),
        None => TallyOutcome::Pending,
    };
    'outer: for (i, a) in crossing.iter().enumerate() {
        for b in &crossing[i + 1..] {
            if a.epoch == b.epoch {
                outcome = TallyOutcome::Conflict {
                    first: *a,
                    second: *b,
                };
                break 'outer;
            }
        }
    }
    TallyReport {
        outcome,
        discarded,
        evidence,
        weights,
    }
}

//! The final-committee protocol.
//!
//! A dynasty is a credit-weighted committee drawn by VRF sortition. Inside a
//! dynasty, members win the right to propose in a slot by Proof-of-Credit
//! (one hash evaluation per slot, threshold proportional to credit), vote on
//! every epoch-boundary block, and finalize it once more than two thirds of
//! the dynasty's credit agrees. A RandShare session during each dynasty
//! produces the seed that picks the next one.

mod incentives;
mod node;
mod poc;
mod randshare;
mod sortition;
mod vote;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Digest256, PublicKey};
use crate::ledger::{Block, ForkTree};

pub use incentives::{
    apply_incentives, CreditCause, CreditEvent, CreditLedger, EpochEvents, IncentiveParams,
};
pub use node::{
    microchain_run, ConflictRecord, MicroMessage, MicrochainParams, MicrochainReport,
    MicrochainScenario, SeedNote, Validator, ValidatorFault, ValidatorSpec, ValidatorStats,
};
pub use poc::{
    poc_eligible, poc_hash, poc_target, verify_block_poc, PocProposer, PocReject, ProposeError,
};
pub use randshare::{
    default_threshold, fallback_seed, run_randshare, RandShareMsg, RandShareOutcome, RandShareRun,
    RandShareSession, RandShareStatus,
};
pub use sortition::{
    draw_ticket, select_committee, sortition_input, sortition_key, verify_committee,
    SortitionTicket,
};
pub use vote::{
    cast_vote, tally_votes, EquivocationEvidence, TallyOutcome, TallyReport, Vote, VoteReject,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MicrochainError {
    #[error("validator set is empty")]
    NoValidators,
    #[error("duplicate validator key {0:?}")]
    DuplicateMember(PublicKey),
    #[error("dynasty holds no credit")]
    ZeroCredit,
    #[error("committee of {k} requested but only {eligible} validators hold credit")]
    NotEnoughCandidates { k: usize, eligible: usize },
    #[error("sortition proof for {0:?} does not verify")]
    BadSortitionProof(PublicKey),
    #[error("total credit is zero")]
    ZeroTotalCredit,
    #[error("rho must be positive and finite, got {0}")]
    BadRho(f64),
    #[error("head at height {height} is not an epoch boundary (epoch length {epoch_length})")]
    NotAtBoundary { height: u64, epoch_length: u64 },
    #[error("simulation: {0}")]
    Sim(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub pk: PublicKey,
    pub credit: u64,
}

/// A committee together with the randomness that picked it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dynasty {
    pub id: u64,
    /// Sorted by public key.
    pub members: Vec<Member>,
    pub seed: Digest256,
    pub start_height: u64,
}

impl Dynasty {
    pub fn new(
        id: u64,
        mut members: Vec<Member>,
        seed: Digest256,
        start_height: u64,
    ) -> Result<Self, MicrochainError> {
        if members.is_empty() {
            return Err(MicrochainError::NoValidators);
        }
        members.sort_by_key(|m| m.pk);
        if let Some(w) = members.windows(2).find(|w| w[0].pk == w[1].pk) {
            return Err(MicrochainError::DuplicateMember(w[0].pk));
        }
        if members.iter().all(|m| m.credit == 0) {
            return Err(MicrochainError::ZeroCredit);
        }
        Ok(Self {
            id,
            members,
            seed,
            start_height,
        })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn total_credit(&self) -> u64 {
        self.members.iter().map(|m| m.credit).sum()
    }

    pub fn credit_of(&self, pk: &PublicKey) -> Option<u64> {
        self.index_of(pk).map(|i| self.members[i].credit)
    }

    pub fn index_of(&self, pk: &PublicKey) -> Option<usize> {
        self.members.binary_search_by_key(pk, |m| m.pk).ok()
    }

    pub fn is_member(&self, pk: &PublicKey) -> bool {
        self.index_of(pk).is_some()
    }

    pub fn pks(&self) -> BTreeSet<PublicKey> {
        self.members.iter().map(|m| m.pk).collect()
    }
}

/// Genesis block, a fork tree rooted at it, and the initial dynasty made of
/// every listed validator.
pub fn genesis_init(
    validators: &[(PublicKey, u64)],
    epoch_length: u64,
) -> Result<(Block, ForkTree, Dynasty), MicrochainError> {
    let members = validators
        .iter()
        .map(|&(pk, credit)| Member { pk, credit })
        .collect();
    let dynasty = Dynasty::new(0, members, Digest256::ZERO, 0)?;
    let genesis = Block::genesis(Vec::new());
    let tree = ForkTree::new(genesis.clone(), epoch_length);
    Ok((genesis, tree, dynasty))
}

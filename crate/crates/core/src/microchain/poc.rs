use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Dynasty, MicrochainError};
use crate::crypto::{hash_parts, Digest256, KeyPair, PublicKey};
use crate::ledger::{Block, BlockError, BlockTemplate, ForkTree, Transaction};

/// Scale used to turn a real `rho` into an exact rational.
const RHO_SCALE: u64 = 1_000_000_000;

/// `floor((2^bits - 1) * rho * credit / total)`, clamped to `2^bits - 1`.
pub fn poc_target(credit: u64, total: u64, rho: f64, bits: u32) -> Result<u64, MicrochainError> {
    if total == 0 {
        return Err(MicrochainError::ZeroTotalCredit);
    }
    if !(rho.is_finite() && rho > 0.0) {
        return Err(MicrochainError::BadRho(rho));
    }
    let bits = bits.clamp(1, 64);
    let max = if bits == 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    };
    let rho_num = (rho * RHO_SCALE as f64).round() as u64;
    let t = BigUint::from(max) * credit * rho_num / (BigUint::from(total) * RHO_SCALE);
    Ok(u64::try_from(t).unwrap_or(max).min(max))
}

/// First eight bytes of `hash(head || slot || pk || credit)`.
pub fn poc_hash(head: &Digest256, slot: u64, pk: &PublicKey, credit: u64) -> u64 {
    hash_parts(&[&head.0, &slot.to_be_bytes(), &pk.0, &credit.to_be_bytes()]).prefix_u64()
}

pub fn poc_eligible(
    head: &Digest256,
    slot: u64,
    pk: &PublicKey,
    credit: u64,
    total: u64,
    rho: f64,
) -> bool {
    credit > 0
        && poc_target(credit, total, rho, 64).is_ok_and(|t| poc_hash(head, slot, pk, credit) <= t)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProposeError {
    #[error("second eligibility evaluation in slot {slot}")]
    Grinding { slot: u64 },
    #[error("validator is not a member of the dynasty")]
    NotMember,
}

/// A validator's proposing side. Allows one eligibility hash per slot.
#[derive(Debug, Clone)]
pub struct PocProposer {
    keys: KeyPair,
    last_slot: Option<u64>,
    pub evaluations: u64,
    pub violations: u64,
}

impl PocProposer {
    pub fn new(keys: KeyPair) -> Self {
        Self {
            keys,
            last_slot: None,
            evaluations: 0,
            violations: 0,
        }
    }

    pub fn pk(&self) -> PublicKey {
        self.keys.public()
    }

    pub fn try_propose(
        &mut self,
        head: &Block,
        slot: u64,
        dynasty: &Dynasty,
        rho: f64,
        transactions: Vec<Transaction>,
    ) -> Result<Option<Block>, ProposeError> {
        self.try_propose_with(head, slot, dynasty, rho, || transactions)
    }

    /// Same as [`PocProposer::try_propose`]; `make_txs` runs only when eligible.
    pub fn try_propose_with(
        &mut self,
        head: &Block,
        slot: u64,
        dynasty: &Dynasty,
        rho: f64,
        make_txs: impl FnOnce() -> Vec<Transaction>,
    ) -> Result<Option<Block>, ProposeError> {
        if self.last_slot.is_some_and(|last| slot <= last) {
            self.violations += 1;
            return Err(ProposeError::Grinding { slot });
        }
        let pk = self.keys.public();
        let Some(credit) = dynasty.credit_of(&pk) else {
            self.violations += 1;
            return Err(ProposeError::NotMember);
        };
        self.last_slot = Some(slot);
        self.evaluations += 1;
        let prev = head.hash();
        if !poc_eligible(&prev, slot, &pk, credit, dynasty.total_credit(), rho) {
            return Ok(None);
        }
        let template = BlockTemplate {
            height: head.header.height + 1,
            prev_hash: prev,
            slot,
            dynasty_id: dynasty.id,
            proposer_credit: credit,
            nonce: 0,
        };
        Ok(Some(Block::build(&self.keys, template, make_txs())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PocReject {
    #[error("bad-signature")]
    BadSignature,
    #[error("not-member")]
    NotMember,
    #[error("not-eligible")]
    NotEligible,
    #[error("stale-slot")]
    StaleSlot,
    #[error("unknown-parent")]
    UnknownParent,
    #[error("malformed: {0}")]
    Malformed(String),
}

impl PocReject {
    pub fn reason(&self) -> &'static str {
        match self {
            PocReject::BadSignature => "bad-signature",
            PocReject::NotMember => "not-member",
            PocReject::NotEligible => "not-eligible",
            PocReject::StaleSlot => "stale-slot",
            PocReject::UnknownParent => "unknown-parent",
            PocReject::Malformed(_) => "malformed",
        }
    }
}

/// Re-checks a proposed block against the dynasty and the local tree.
/// `current_slot` bounds how far ahead a block's slot may be.
pub fn verify_block_poc(
    block: &Block,
    dynasty: &Dynasty,
    tree: &ForkTree,
    current_slot: u64,
    rho: f64,
) -> Result<(), PocReject> {
    let h = &block.header;
    let Some(parent) = tree.get(&h.prev_hash) else {
        return Err(PocReject::UnknownParent);
    };
    let Some(credit) = dynasty
        .credit_of(&h.proposer_pk)
        .filter(|_| h.dynasty_id == dynasty.id)
    else {
        return Err(PocReject::NotMember);
    };
    match block.validate_structure() {
        Ok(()) => {}
        Err(BlockError::BadSignature) => return Err(PocReject::BadSignature),
        Err(e) => return Err(PocReject::Malformed(e.to_string())),
    }
    if h.height != parent.header.height + 1 {
        return Err(PocReject::Malformed("height does not follow parent".into()));
    }
    if h.slot <= parent.header.slot || h.slot > current_slot {
        return Err(PocReject::StaleSlot);
    }
    if h.proposer_credit != credit
        || !poc_eligible(
            &h.prev_hash,
            h.slot,
            &h.proposer_pk,
            credit,
            dynasty.total_credit(),
            rho,
        )
    {
        return Err(PocReject::NotEligible);
    }
    Ok(())
}

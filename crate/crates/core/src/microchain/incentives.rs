use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::PublicKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncentiveParams {
    pub r_block: u64,
    pub r_vote: u64,
}

impl Default for IncentiveParams {
    fn default() -> Self {
        Self {
            r_block: 2,
            r_vote: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreditCause {
    BlockReward,
    VoteReward,
    EquivocationPenalty,
    GrindingPenalty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditEvent {
    pub cause: CreditCause,
    pub pk: PublicKey,
    pub delta: i64,
    pub slot: u64,
}

/// Credit per validator with an audit log of every change.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditLedger {
    credits: BTreeMap<PublicKey, u64>,
    log: Vec<CreditEvent>,
}

impl CreditLedger {
    pub fn new(initial: impl IntoIterator<Item = (PublicKey, u64)>) -> Self {
        Self {
            credits: initial.into_iter().collect(),
            log: Vec::new(),
        }
    }

    pub fn credit(&self, pk: &PublicKey) -> u64 {
        self.credits.get(pk).copied().unwrap_or(0)
    }

    pub fn credits(&self) -> &BTreeMap<PublicKey, u64> {
        &self.credits
    }

    pub fn log(&self) -> &[CreditEvent] {
        &self.log
    }

    fn reward(&mut self, pk: PublicKey, amount: u64, cause: CreditCause, slot: u64) {
        if amount == 0 {
            return;
        }
        let c = self.credits.entry(pk).or_default();
        *c = c.saturating_add(amount);
        self.log.push(CreditEvent {
            cause,
            pk,
            delta: amount as i64,
            slot,
        });
    }

    fn slash(&mut self, pk: PublicKey, cause: CreditCause, slot: u64) {
        let c = self.credits.entry(pk).or_default();
        let lost = std::mem::take(c);
        if lost > 0 {
            self.log.push(CreditEvent {
                cause,
                pk,
                delta: -(lost as i64),
                slot,
            });
        }
    }
}

/// What happened in one finalized stretch of the chain.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochEvents {
    /// One entry per finalized block.
    pub finalized_proposers: Vec<PublicKey>,
    pub correct_voters: Vec<PublicKey>,
    pub equivocators: Vec<PublicKey>,
    pub grinders: Vec<PublicKey>,
    pub slot: u64,
}

impl EpochEvents {
    pub fn is_empty(&self) -> bool {
        self.finalized_proposers.is_empty()
            && self.correct_voters.is_empty()
            && self.equivocators.is_empty()
            && self.grinders.is_empty()
    }
}

/// Penalties first; a slashed validator earns nothing in the same round.
pub fn apply_incentives(
    mut ledger: CreditLedger,
    events: &EpochEvents,
    params: &IncentiveParams,
) -> CreditLedger {
    let mut punished = Vec::new();
    for pk in &events.equivocators {
        ledger.slash(*pk, CreditCause::EquivocationPenalty, events.slot);
        punished.push(*pk);
    }
    for pk in &events.grinders {
        ledger.slash(*pk, CreditCause::GrindingPenalty, events.slot);
        punished.push(*pk);
    }
    for pk in events
        .finalized_proposers
        .iter()
        .filter(|pk| !punished.contains(pk))
    {
        ledger.reward(*pk, params.r_block, CreditCause::BlockReward, events.slot);
    }
    for pk in events
        .correct_voters
        .iter()
        .filter(|pk| !punished.contains(pk))
    {
        ledger.reward(*pk, params.r_vote, CreditCause::VoteReward, events.slot);
    }
    ledger
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;

    fn pks(n: u64) -> Vec<PublicKey> {
        (1..=n).map(|i| KeyPair::from_seed(i).public()).collect()
    }

    #[test]
    fn no_events_change_nothing() {
        let l = CreditLedger::new(pks(3).into_iter().map(|p| (p, 4)));
        let out = apply_incentives(
            l.clone(),
            &EpochEvents::default(),
            &IncentiveParams::default(),
        );
        assert_eq!(out, l);
    }

    #[test]
    fn block_reward_is_logged() {
        let p = pks(4);
        let l = CreditLedger::new(p.iter().map(|k| (*k, 1)));
        let ev = EpochEvents {
            finalized_proposers: vec![p[2]],
            slot: 9,
            ..Default::default()
        };
        let out = apply_incentives(l, &ev, &IncentiveParams::default());
        assert_eq!(out.credit(&p[2]), 3);
        assert_eq!(out.log().len(), 1);
        assert_eq!(
            out.log()[0],
            CreditEvent {
                cause: CreditCause::BlockReward,
                pk: p[2],
                delta: 2,
                slot: 9
            }
        );
    }

    #[test]
    fn equivocation_slashes_to_zero_and_blocks_rewards() {
        let p = pks(2);
        let l = CreditLedger::new(p.iter().map(|k| (*k, 5)));
        let ev = EpochEvents {
            finalized_proposers: vec![p[0]],
            correct_voters: vec![p[0], p[1]],
            equivocators: vec![p[0]],
            ..Default::default()
        };
        let out = apply_incentives(l, &ev, &IncentiveParams::default());
        assert_eq!(out.credit(&p[0]), 0);
        assert_eq!(out.credit(&p[1]), 6);
        let causes: Vec<CreditCause> = out.log().iter().map(|e| e.cause).collect();
        assert_eq!(
            causes,
            vec![CreditCause::EquivocationPenalty, CreditCause::VoteReward]
        );
        // credit never goes negative, and a second slash logs nothing
        let out = apply_incentives(out, &ev, &IncentiveParams::default());
        assert_eq!(out.credit(&p[0]), 0);
        assert_eq!(out.log().len(), 3);
    }
}

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{Dynasty, Member, MicrochainError};
use crate::crypto::{vrf_evaluate, vrf_verify, Digest256, KeyPair, PublicKey, VrfOutput};

/// A validator's claim to a committee seat, checkable from the proof alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortitionTicket {
    pub pk: PublicKey,
    pub credit: u64,
    pub vrf: VrfOutput,
}

pub fn sortition_input(seed: &Digest256, dynasty_id: u64) -> Vec<u8> {
    let mut v = Vec::with_capacity(32 + 9 + 8);
    v.extend_from_slice(&seed.0);
    v.extend_from_slice(b"sortition");
    v.extend_from_slice(&dynasty_id.to_be_bytes());
    v
}

pub fn draw_ticket(
    keys: &KeyPair,
    credit: u64,
    seed: &Digest256,
    dynasty_id: u64,
) -> SortitionTicket {
    SortitionTicket {
        pk: keys.public(),
        credit,
        vrf: vrf_evaluate(keys, &sortition_input(seed, dynasty_id)),
    }
}

/// `ln(u^(1/c)) = ln(u) / c` with `u = value / 2^64`. Same order as the key
/// itself; zero credit maps to negative infinity.
pub fn sortition_key(ticket: &SortitionTicket) -> f64 {
    if ticket.credit == 0 || ticket.vrf.value == 0 {
        return f64::NEG_INFINITY;
    }
    ticket.vrf.fraction().ln() / ticket.credit as f64
}

fn rank(a: &SortitionTicket, b: &SortitionTicket) -> Ordering {
    sortition_key(b)
        .total_cmp(&sortition_key(a))
        .then_with(|| a.pk.cmp(&b.pk))
}

/// Weighted sampling without replacement: the `k` tickets with the largest
/// keys form dynasty `dynasty_id`.
pub fn select_committee(
    tickets: &[SortitionTicket],
    seed: &Digest256,
    dynasty_id: u64,
    k: usize,
    start_height: u64,
) -> Result<Dynasty, MicrochainError> {
    let input = sortition_input(seed, dynasty_id);
    if let Some(t) = tickets.iter().find(|t| !vrf_verify(&t.pk, &input, &t.vrf)) {
        return Err(MicrochainError::BadSortitionProof(t.pk));
    }
    let mut eligible: Vec<&SortitionTicket> = tickets.iter().filter(|t| t.credit > 0).collect();
    if k == 0 || eligible.len() < k {
        return Err(MicrochainError::NotEnoughCandidates {
            k,
            eligible: eligible.len(),
        });
    }
    eligible.sort_by(|a, b| rank(a, b));
    let members = eligible[..k]
        .iter()
        .map(|t| Member {
            pk: t.pk,
            credit: t.credit,
        })
        .collect();
    Dynasty::new(dynasty_id, members, *seed, start_height)
}

/// Re-derives the committee from the published tickets and compares.
pub fn verify_committee(tickets: &[SortitionTicket], claimed: &Dynasty, k: usize) -> bool {
    match select_committee(tickets, &claimed.seed, claimed.id, k, claimed.start_height) {
        Ok(d) => d == *claimed,
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash_parts;

    fn keys(n: u64) -> Vec<KeyPair> {
        (0..n).map(|i| KeyPair::from_seed(100 + i)).collect()
    }

    fn seed(i: u64) -> Digest256 {
        hash_parts(&[b"test-seed", &i.to_be_bytes()])
    }

    fn tickets(ks: &[KeyPair], credits: &[u64], s: &Digest256) -> Vec<SortitionTicket> {
        ks.iter()
            .zip(credits)
            .map(|(k, &c)| draw_ticket(k, c, s, 1))
            .collect()
    }

    #[test]
    fn full_committee_takes_every_positive_credit() {
        let ks = keys(5);
        let ts = tickets(&ks, &[1, 2, 0, 3, 1], &seed(0));
        let d = select_committee(&ts, &seed(0), 1, 4, 0).unwrap();
        assert_eq!(d.k(), 4);
        assert!(!d.is_member(&ks[2].public()));
        assert!(matches!(
            select_committee(&ts, &seed(0), 1, 5, 0),
            Err(MicrochainError::NotEnoughCandidates { k: 5, eligible: 4 })
        ));
    }

    #[test]
    fn zero_credit_is_never_selected() {
        let ks = keys(3);
        for i in 0..1000 {
            let ts = tickets(&ks, &[0, 1, 5], &seed(i));
            let d = select_committee(&ts, &seed(i), 1, 2, 0).unwrap();
            assert!(!d.is_member(&ks[0].public()));
        }
    }

    #[test]
    fn forged_or_mismatched_tickets_fail() {
        let ks = keys(3);
        let mut ts = tickets(&ks, &[1, 1, 1], &seed(3));
        let d = select_committee(&ts, &seed(3), 1, 2, 0).unwrap();
        assert!(verify_committee(&ts, &d, 2));
        ts[1].vrf.value ^= 1;
        assert_eq!(
            select_committee(&ts, &seed(3), 1, 2, 0),
            Err(MicrochainError::BadSortitionProof(ks[1].public()))
        );
        let other = tickets(&ks, &[1, 1, 1], &seed(4));
        assert!(!verify_committee(&other, &d, 2));
    }

    #[test]
    fn single_seat_frequency_follows_credit() {
        let ks = keys(4);
        let credits = [1, 1, 2, 4];
        let mut wins = [0u32; 4];
        let runs = 10_000;
        for i in 0..runs {
            let ts = tickets(&ks, &credits, &seed(i));
            let winner = select_committee(&ts, &seed(i), 1, 1, 0).unwrap().members[0].pk;
            wins[ks.iter().position(|k| k.public() == winner).unwrap()] += 1;
        }
        for (w, c) in wins.iter().zip(credits) {
            let share = *w as f64 / runs as f64;
            assert!((share - c as f64 / 8.0).abs() < 0.03, "{wins:?}");
        }
    }
}

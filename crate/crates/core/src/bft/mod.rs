//! Classical fault-tolerant baselines: quorum arithmetic, the Oral
//! Messaging algorithm OM(f), Viewstamped Replication and PBFT. The replica
//! protocols are event-driven state machines hosted on [`crate::netsim`].

pub mod om;
pub mod pbft;
pub mod vr;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Om,
    Vr,
    Pbft,
}

/// Replica floor and phase quorum for tolerating `f` faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuorumParams {
    pub protocol: Protocol,
    pub f: usize,
    pub n_min: usize,
    pub quorum: usize,
}

impl QuorumParams {
    pub fn feasible(&self, n: usize) -> bool {
        n >= self.n_min
    }
}

/// OM and PBFT tolerate Byzantine faults and need `3f+1` replicas with
/// `2f+1` quorums; VR tolerates crashes with `2f+1` replicas, and its
/// primary commits on `f` PrepareOKs plus its own, i.e. `f+1`.
pub fn quorum_params(protocol: Protocol, f: usize) -> QuorumParams {
    let (n_min, quorum) = match protocol {
        Protocol::Om | Protocol::Pbft => (3 * f + 1, 2 * f + 1),
        Protocol::Vr => (2 * f + 1, f + 1),
    };
    QuorumParams {
        protocol,
        f,
        n_min,
        quorum,
    }
}

/// Largest `f` a roster of `n` replicas tolerates under `protocol`.
pub fn max_faults(protocol: Protocol, n: usize) -> usize {
    match protocol {
        Protocol::Om | Protocol::Pbft => n.saturating_sub(1) / 3,
        Protocol::Vr => n.saturating_sub(1) / 2,
    }
}

/// Most frequent value; ties go to the smallest, so every caller holding
/// the same multiset picks the same value.
///
/// # Panics
/// On an empty slice.
pub fn majority<T: Ord + Clone>(values: &[T]) -> T {
    assert!(!values.is_empty(), "majority of an empty list");
    let mut counts: BTreeMap<&T, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap();
    // BTreeMap iterates in ascending order, so the first hit is the smallest.
    counts
        .into_iter()
        .find(|(_, c)| *c == best)
        .unwrap()
        .0
        .clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quorum_table() {
        assert_eq!(
            quorum_params(Protocol::Pbft, 1),
            QuorumParams {
                protocol: Protocol::Pbft,
                f: 1,
                n_min: 4,
                quorum: 3
            }
        );
        assert_eq!(
            quorum_params(Protocol::Vr, 1),
            QuorumParams {
                protocol: Protocol::Vr,
                f: 1,
                n_min: 3,
                quorum: 2
            }
        );
        let p0 = quorum_params(Protocol::Pbft, 0);
        assert_eq!((p0.n_min, p0.quorum), (1, 1));
        assert!(!quorum_params(Protocol::Pbft, 1).feasible(3));
    }

    #[test]
    fn max_faults_inverts_the_floor() {
        for f in 0..6 {
            for p in [Protocol::Om, Protocol::Vr, Protocol::Pbft] {
                let q = quorum_params(p, f);
                assert_eq!(max_faults(p, q.n_min), f);
                assert!(q.n_min == 1 || max_faults(p, q.n_min - 1) < f);
            }
        }
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority(&['a', 'a', 'r']), 'a');
        assert_eq!(majority(&['x']), 'x');
        assert_eq!(majority(&['z', 'x', 'y']), 'x');
        assert_eq!(majority(&[3, 1, 3, 1]), 1);
    }
}

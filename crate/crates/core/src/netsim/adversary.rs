use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use super::{NodeId, SimTime};

/// What an equivocation strategy does with one outbound message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Substitution<M> {
    Keep,
    Replace(M),
    Drop,
}

/// Per-recipient payload substitution for an equivocating sender.
pub trait EquivocationStrategy<M> {
    fn substitute(&self, from: NodeId, to: NodeId, msg: &M) -> Substitution<M>;
}

impl<M, F> EquivocationStrategy<M> for F
where
    F: Fn(NodeId, NodeId, &M) -> Substitution<M>,
{
    fn substitute(&self, from: NodeId, to: NodeId, msg: &M) -> Substitution<M> {
        self(from, to, msg)
    }
}

pub enum Behavior<M> {
    Equivocate(Box<dyn EquivocationStrategy<M>>),
    Withhold,
    Delay {
        max_ms: u64,
    },
    /// Node stops at `at`; if `recover_at` is set it restarts then with
    /// whatever state it chose to persist.
    Crash {
        at: SimTime,
        recover_at: Option<SimTime>,
    },
}

impl<M> fmt::Debug for Behavior<M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Behavior::Equivocate(_) => f.write_str("Equivocate(..)"),
            Behavior::Withhold => f.write_str("Withhold"),
            Behavior::Delay { max_ms } => write!(f, "Delay {{ max_ms: {max_ms} }}"),
            Behavior::Crash { at, recover_at } => {
                write!(f, "Crash {{ at: {at}, recover_at: {recover_at:?} }}")
            }
        }
    }
}

/// Corrupted nodes and their behaviours. Only a corrupted node's own sends
/// are ever altered.
pub struct AdversarySpec<M> {
    behaviors: BTreeMap<NodeId, Vec<Behavior<M>>>,
}

impl<M> Default for AdversarySpec<M> {
    fn default() -> Self {
        Self {
            behaviors: BTreeMap::new(),
        }
    }
}

impl<M> fmt::Debug for AdversarySpec<M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.behaviors.iter()).finish()
    }
}

/// One outbound message after the adversary has had its say.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transformed<M> {
    pub to: NodeId,
    pub msg: M,
    pub extra_delay: u64,
}

impl<M: Clone> AdversarySpec<M> {
    pub fn honest() -> Self {
        Self::default()
    }

    pub fn with(mut self, node: NodeId, behavior: Behavior<M>) -> Self {
        self.behaviors.entry(node).or_default().push(behavior);
        self
    }

    pub fn is_corrupted(&self, node: NodeId) -> bool {
        self.behaviors.contains_key(&node)
    }

    pub fn corrupted(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.behaviors.keys().copied()
    }

    pub(crate) fn crash_schedule(&self) -> Vec<(NodeId, SimTime, Option<SimTime>)> {
        self.behaviors
            .iter()
            .flat_map(|(&n, bs)| {
                bs.iter().filter_map(move |b| match *b {
                    Behavior::Crash { at, recover_at } => Some((n, at, recover_at)),
                    _ => None,
                })
            })
            .collect()
    }

    /// Applies `sender`'s behaviours to its outbound messages sent at `now`.
    pub fn transform<R: Rng + ?Sized>(
        &self,
        sender: NodeId,
        now: SimTime,
        outbound: Vec<(NodeId, M)>,
        rng: &mut R,
    ) -> Vec<Transformed<M>> {
        let Some(behaviors) = self.behaviors.get(&sender) else {
            return outbound
                .into_iter()
                .map(|(to, msg)| Transformed {
                    to,
                    msg,
                    extra_delay: 0,
                })
                .collect();
        };
        let mut out = Vec::with_capacity(outbound.len());
        'msgs: for (to, msg) in outbound {
            let mut cur = Transformed {
                to,
                msg,
                extra_delay: 0,
            };
            for b in behaviors {
                match b {
                    Behavior::Withhold => continue 'msgs,
                    Behavior::Crash { at, recover_at } => {
                        let down = now >= *at && recover_at.is_none_or(|r| now < r);
                        if down {
                            continue 'msgs;
                        }
                    }
                    Behavior::Delay { max_ms } => cur.extra_delay += rng.random_range(0..=*max_ms),
                    Behavior::Equivocate(strategy) => {
                        match strategy.substitute(sender, cur.to, &cur.msg) {
                            Substitution::Keep => {}
                            Substitution::Replace(m) => cur.msg = m,
                            Substitution::Drop => continue 'msgs,
                        }
                    }
                }
            }
            out.push(cur);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn honest_senders_untouched() {
        let adv: AdversarySpec<u8> = AdversarySpec::honest().with(1, Behavior::Withhold);
        let mut rng = substream(0, "t");
        let out = adv.transform(0, 0, vec![(1, 7), (2, 8)], &mut rng);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|t| t.extra_delay == 0));
    }

    #[test]
    fn withhold_drops_everything() {
        let adv: AdversarySpec<u8> = AdversarySpec::honest().with(1, Behavior::Withhold);
        let mut rng = substream(0, "t");
        assert!(adv
            .transform(1, 0, vec![(0, 7), (2, 8)], &mut rng)
            .is_empty());
    }

    #[test]
    fn equivocation_gives_peer_distinct_payloads() {
        // Commander tells node 1 "a" and node 2 "r".
        let table = |_from: NodeId, to: NodeId, _m: &char| {
            Substitution::Replace(if to == 1 { 'a' } else { 'r' })
        };
        let adv = AdversarySpec::honest().with(0, Behavior::Equivocate(Box::new(table)));
        let mut rng = substream(0, "t");
        let out = adv.transform(0, 0, vec![(1, 'a'), (2, 'a')], &mut rng);
        assert_eq!(
            out.iter().map(|t| t.msg).collect::<Vec<_>>(),
            vec!['a', 'r']
        );
    }

    #[test]
    fn crash_drops_later_sends_only() {
        let adv: AdversarySpec<u8> = AdversarySpec::honest().with(
            0,
            Behavior::Crash {
                at: 10,
                recover_at: None,
            },
        );
        let mut rng = substream(0, "t");
        assert_eq!(adv.transform(0, 9, vec![(1, 1)], &mut rng).len(), 1);
        assert!(adv.transform(0, 11, vec![(1, 1)], &mut rng).is_empty());
    }

    #[test]
    fn delay_is_bounded() {
        let adv: AdversarySpec<u8> =
            AdversarySpec::honest().with(0, Behavior::Delay { max_ms: 30 });
        let mut rng = substream(0, "t");
        for _ in 0..1000 {
            let out = adv.transform(0, 0, vec![(1, 1)], &mut rng);
            assert!(out[0].extra_delay <= 30);
        }
    }
}

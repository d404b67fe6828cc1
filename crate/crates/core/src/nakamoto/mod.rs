//! Proof-of-work longest-chain consensus, simulated.
//!
//! Mining is a memoryless race: miner `i` finds blocks at rate
//! `(w_i / Σw) / T`, so the winner of each round is drawn in proportion to
//! hash power without grinding real hashes.

mod miner;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{KeyPair, PublicKey};
use crate::rng::{indexed_substream, substream};

pub use miner::{
    mining_run, HeaderChain, Miner, MiningReport, MiningScenario, NakamotoMessage,
    CONFIRMATION_DEPTH,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NakamotoError {
    #[error("hash power must be non-negative and sum to a positive value")]
    ZeroWeight,
    #[error("miner index {0} out of range")]
    NoSuchMiner(usize),
    #[error("attacker share {0} outside [0, 1]")]
    BadShare(f64),
    #[error("block at height {got} does not follow parent height {parent}")]
    BadHeight { parent: u64, got: u64 },
    #[error("block proposer is not a registered miner")]
    UnknownMiner,
    #[error("block carries a foreign merkle root")]
    BadMerkleRoot,
    #[error("block timestamp precedes its parent")]
    TimestampRegress,
    #[error("simulation: {0}")]
    Sim(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MinerPolicy {
    #[default]
    HonestGossip,
    SelfishMining,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinerConfig {
    pub pk: PublicKey,
    pub hash_power: f64,
    pub policy: MinerPolicy,
}

impl MinerConfig {
    pub fn new(index: u64, hash_power: f64, policy: MinerPolicy) -> Self {
        Self {
            pk: miner_keys(index).public(),
            hash_power,
            policy,
        }
    }

    pub fn honest(&self) -> bool {
        self.policy == MinerPolicy::HonestGossip
    }
}

pub fn miner_keys(index: u64) -> KeyPair {
    KeyPair::from_seed(0x6d69_6e65_7200_0000 | index)
}

/// Chance that miner `i` wins a given round: `w_i / Σw`.
pub fn pow_win_prob(weights: &[f64], i: usize) -> Result<f64, NakamotoError> {
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(NakamotoError::ZeroWeight);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(NakamotoError::ZeroWeight);
    }
    let w = weights.get(i).ok_or(NakamotoError::NoSuchMiner(i))?;
    Ok(w / total)
}

/// Chance that an attacker holding share `p` of the hash power ever makes up
/// an `m`-block deficit: `(p / (1 - p))^m`, capped at 1.
pub fn attacker_overtake_prob(p: f64, m: u32) -> f64 {
    if p >= 0.5 || m == 0 {
        return 1.0;
    }
    (p / (1.0 - p)).powi(m as i32).min(1.0)
}

/// Absolute time (ms) of the miner's next success, or `None` for a miner with
/// no hash power.
pub fn schedule_next_block<R: Rng + ?Sized>(
    miner: &MinerConfig,
    total_weight: f64,
    now_ms: f64,
    interval_ms: f64,
    rng: &mut R,
) -> Option<f64> {
    if miner.hash_power <= 0.0 || total_weight <= 0.0 {
        return None;
    }
    let rate = miner.hash_power / total_weight / interval_ms;
    let exp = Exp::new(rate).ok()?;
    Some(now_ms + exp.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaceTally {
    pub wins: Vec<u64>,
    pub blocks: u64,
    pub elapsed_ms: f64,
}

impl RaceTally {
    pub fn share(&self, i: usize) -> f64 {
        self.wins[i] as f64 / self.blocks as f64
    }

    pub fn mean_interval_ms(&self) -> f64 {
        self.elapsed_ms / self.blocks as f64
    }
}

/// Runs `blocks` rounds of the mining race with no network in between.
pub fn mining_race(
    miners: &[MinerConfig],
    blocks: u64,
    interval_ms: f64,
    seed: u64,
) -> Result<RaceTally, NakamotoError> {
    let weights: Vec<f64> = miners.iter().map(|m| m.hash_power).collect();
    pow_win_prob(&weights, 0)?;
    let total: f64 = weights.iter().sum();
    let mut rng = substream(seed, "mining");
    let mut next: Vec<Option<f64>> = miners
        .iter()
        .map(|m| schedule_next_block(m, total, 0.0, interval_ms, &mut rng))
        .collect();
    let mut wins = vec![0; miners.len()];
    let mut now = 0.0;
    for _ in 0..blocks {
        let (winner, at) = next
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (i, t)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("some miner has power");
        now = at;
        wins[winner] += 1;
        next[winner] = schedule_next_block(&miners[winner], total, now, interval_ms, &mut rng);
    }
    Ok(RaceTally {
        wins,
        blocks,
        elapsed_ms: now,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OvertakeEstimate {
    pub p: f64,
    pub m: u32,
    pub trials: u64,
    pub successes: u64,
    pub rate: f64,
    pub analytic: f64,
    pub std_err: f64,
}

/// Steps allowed per trial when the attacker has no drift against it.
pub const OVERTAKE_STEP_CAP: u64 = 1_000_000;

/// Monte-Carlo estimate of the attacker catching up from `m` blocks behind.
///
/// Each step is the next block found anywhere: the attacker's with
/// probability `p`. A trial succeeds when the deficit reaches zero. Trials
/// with `p < 0.5` are abandoned once catching up has become less likely than
/// 1e-12; with `p >= 0.5` they run up to [`OVERTAKE_STEP_CAP`] steps.
pub fn overtake_monte_carlo(
    p: f64,
    m: u32,
    trials: u64,
    seed: u64,
) -> Result<OvertakeEstimate, NakamotoError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NakamotoError::BadShare(p));
    }
    let give_up = if p < 0.5 && p > 0.0 {
        Some((1e-12f64.ln() / (p / (1.0 - p)).ln()).ceil() as u64)
    } else {
        None
    };
    let mut successes = 0;
    for t in 0..trials {
        let mut rng = indexed_substream(seed, "overtake", t);
        let mut deficit = m as u64;
        let mut steps = 0;
        while deficit > 0 && steps < OVERTAKE_STEP_CAP {
            if p == 0.0 || give_up.is_some_and(|g| deficit > g) {
                break;
            }
            if rng.random_bool(p) {
                deficit -= 1;
            } else {
                deficit += 1;
            }
            steps += 1;
        }
        if deficit == 0 {
            successes += 1;
        }
    }
    let rate = successes as f64 / trials as f64;
    let analytic = attacker_overtake_prob(p, m);
    let std_err = (analytic * (1.0 - analytic) / trials as f64).sqrt();
    Ok(OvertakeEstimate {
        p,
        m,
        trials,
        successes,
        rate,
        analytic,
        std_err,
    })
}

//! Consensus-protocol laboratory.
//!
//! Implements the Microchain final-committee protocol (credit-weighted
//! sortition, Proof-of-Credit proposal, voting-based checkpoint finality,
//! RandShare epoch randomness) next to the classical baselines it is
//! measured against (OM(f), Viewstamped Replication, PBFT, Nakamoto
//! longest-chain mining). Every protocol runs as a pure state machine on a
//! deterministic discrete-event network, so any run replays from its seed.

pub mod bft;
pub mod cli;
pub mod codec;
pub mod config;
pub mod crypto;
pub mod ledger;
pub mod metrics;
pub mod microchain;
pub mod nakamoto;
pub mod netsim;
pub mod rng;

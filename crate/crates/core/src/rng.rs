//! Named random sub-streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::hash_parts;

pub type SimRng = ChaCha20Rng;

/// Independent stream for `name` (e.g. "network", "mining", "sortition").
pub fn substream(seed: u64, name: &str) -> SimRng {
    ChaCha20Rng::from_seed(hash_parts(&[b"substream", &seed.to_be_bytes(), name.as_bytes()]).0)
}

/// Stream for one entity inside a named family.
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> SimRng {
    ChaCha20Rng::from_seed(
        hash_parts(&[
            b"substream",
            &seed.to_be_bytes(),
            name.as_bytes(),
            &index.to_be_bytes(),
        ])
        .0,
    )
}

//! Hashing, signatures, a hash-of-signature VRF and Shamir-based PVSS.
//!
//! Everything here is a pure function of its inputs so that whole
//! simulations replay byte-for-byte from a seed.

mod pvss;
mod sig;
mod vrf;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

pub use pvss::{
    pvss_deal, pvss_recover, pvss_verify_share, share_matches, PvssDeal, PvssError, PvssShare,
};
pub use sig::{verify, Ed25519, KeyPair, PublicKey, Signature, SignatureScheme};
pub use vrf::{vrf_evaluate, vrf_verify, VrfOutput};

/// A SHA-256 output. Ordered lexicographically by bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest256(pub [u8; 32]);

impl Digest256 {
    pub const ZERO: Digest256 = Digest256([0; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// First eight bytes read as a big-endian integer.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().unwrap())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Digest256(bytes.try_into().ok()?))
    }

    /// Eight-character prefix for logs.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for Digest256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest256({})", self.short())
    }
}

impl Serialize for Digest256 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest256 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest256::from_hex(&s)
            .ok_or_else(|| serde::de::Error::custom("expected 64 hex characters"))
    }
}

pub fn hash(data: &[u8]) -> Digest256 {
    Digest256(Sha256::digest(data).into())
}

/// Hash of the concatenation of `parts`, without materialising it.
pub fn hash_parts(parts: &[&[u8]]) -> Digest256 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest256(h.finalize().into())
}

use std::fmt;

use ed25519_dalek::{Signer as _, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};

use super::{hash_parts, Digest256};

/// A signature scheme with deterministic signing.
///
/// Determinism is load-bearing: VRF proofs are signatures, and replayed
/// runs must produce identical bytes.
pub trait SignatureScheme {
    fn public_key(secret: &[u8; 32]) -> PublicKey;
    fn sign(secret: &[u8; 32], message: &[u8]) -> Signature;
    fn verify(pk: &PublicKey, message: &[u8], sig: &Signature) -> bool;
}

/// RFC 8032 Ed25519, whose signing nonce is derived from the key and message.
pub struct Ed25519;

impl SignatureScheme for Ed25519 {
    fn public_key(secret: &[u8; 32]) -> PublicKey {
        PublicKey(SigningKey::from_bytes(secret).verifying_key().to_bytes())
    }

    fn sign(secret: &[u8; 32], message: &[u8]) -> Signature {
        Signature(
            SigningKey::from_bytes(secret)
                .sign(message)
                .to_bytes()
                .to_vec(),
        )
    }

    fn verify(pk: &PublicKey, message: &[u8], sig: &Signature) -> bool {
        let Ok(vk) = VerifyingKey::from_bytes(&pk.0) else {
            return false;
        };
        let Ok(bytes) = <[u8; 64]>::try_from(sig.0.as_slice()) else {
            return false;
        };
        vk.verify_strict(message, &ed25519_dalek::Signature::from_bytes(&bytes))
            .is_ok()
    }
}

pub type DefaultScheme = Ed25519;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub const ZERO: PublicKey = PublicKey([0; 32]);

    /// Short identity string derived from the key.
    pub fn identity(&self) -> String {
        hash_parts(&[b"identity", &self.0]).short()
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pk:{}", hex::encode(&self.0[..4]))
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Signature(pub Vec<u8>);

impl Signature {
    pub fn empty() -> Self {
        Signature(Vec::new())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sig:{}", hex::encode(&self.0[..self.0.len().min(4)]))
    }
}

/// Signing key plus its public half. Signing goes through [`DefaultScheme`].
#[derive(Clone)]
pub struct KeyPair {
    secret: [u8; 32],
    public: PublicKey,
}

impl KeyPair {
    pub fn from_secret(secret: [u8; 32]) -> Self {
        let public = DefaultScheme::public_key(&secret);
        Self { secret, public }
    }

    /// Derives the secret from a numeric seed; used for simulation rosters.
    pub fn from_seed(seed: u64) -> Self {
        let d: Digest256 = hash_parts(&[b"keypair-seed", &seed.to_be_bytes()]);
        Self::from_secret(d.0)
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        DefaultScheme::sign(&self.secret, message)
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

/// Never panics; malformed keys or signatures verify as `false`.
pub fn verify(pk: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    DefaultScheme::verify(pk, message, sig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_binding() {
        let kp = KeyPair::from_seed(1);
        let other = KeyPair::from_seed(2);
        for msg in [&b""[..], b"hello", &[0u8; 300]] {
            let sig = kp.sign(msg);
            assert!(verify(&kp.public(), msg, &sig));
            assert!(!verify(&other.public(), msg, &sig));
            let mut flipped = msg.to_vec();
            flipped.push(0);
            flipped[0] ^= 1;
            assert!(!verify(&kp.public(), &flipped, &sig));
        }
    }

    #[test]
    fn signing_is_deterministic() {
        let kp = KeyPair::from_seed(9);
        assert_eq!(kp.sign(b"m"), kp.sign(b"m"));
    }

    #[test]
    fn malformed_inputs_verify_false() {
        let kp = KeyPair::from_seed(3);
        assert!(!verify(&kp.public(), b"m", &Signature(vec![1, 2, 3])));
        assert!(!verify(&kp.public(), b"m", &Signature::empty()));
        let mut sig = kp.sign(b"m");
        sig.0[10] ^= 0x40;
        assert!(!verify(&kp.public(), b"m", &sig));
        // Not a valid curve point encoding.
        assert!(!verify(&PublicKey([0xff; 32]), b"m", &kp.sign(b"m")));
    }
}

use crate::codec::{Canonical, CodecError, Reader, Writer};
use crate::crypto::{hash, verify, Digest256, KeyPair, PublicKey, Signature};

/// A signed transaction. System transactions (genesis roster, the empty
/// marker) have a zero sender and an empty signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub id: Digest256,
    pub sender: PublicKey,
    pub payload: Vec<u8>,
    pub timestamp: u64,
    pub signature: Signature,
}

impl Transaction {
    /// Bytes covered by both the id and the signature.
    fn body_bytes(sender: &PublicKey, payload: &[u8], timestamp: u64) -> Vec<u8> {
        let mut w = Writer::with_capacity(payload.len() + 48);
        w.fixed(&sender.0).bytes(payload).u64(timestamp);
        w.finish()
    }

    pub fn new_signed(keys: &KeyPair, payload: Vec<u8>, timestamp: u64) -> Self {
        let sender = keys.public();
        let body = Self::body_bytes(&sender, &payload, timestamp);
        Self {
            id: hash(&body),
            sender,
            signature: keys.sign(&body),
            payload,
            timestamp,
        }
    }

    pub fn system(payload: Vec<u8>, timestamp: u64) -> Self {
        let sender = PublicKey::ZERO;
        let id = hash(&Self::body_bytes(&sender, &payload, timestamp));
        Self {
            id,
            sender,
            payload,
            timestamp,
            signature: Signature::empty(),
        }
    }

    /// Stands in for "no transactions" so every block has a Merkle root.
    pub fn empty_marker() -> Self {
        Self::system(Vec::new(), 0)
    }

    pub fn is_system(&self) -> bool {
        self.sender == PublicKey::ZERO
    }

    pub fn is_empty_marker(&self) -> bool {
        self.is_system()
            && self.payload.is_empty()
            && self.timestamp == 0
            && self.signature.is_empty()
    }

    pub fn computed_id(&self) -> Digest256 {
        hash(&Self::body_bytes(
            &self.sender,
            &self.payload,
            self.timestamp,
        ))
    }

    /// Id matches content and, for user transactions, the signature verifies.
    pub fn is_well_formed(&self) -> bool {
        if self.computed_id() != self.id {
            return false;
        }
        if self.is_system() {
            return self.signature.is_empty();
        }
        verify(
            &self.sender,
            &Self::body_bytes(&self.sender, &self.payload, self.timestamp),
            &self.signature,
        )
    }

    pub fn encoded_len(&self) -> usize {
        32 + 32 + 4 + self.payload.len() + 8 + 4 + self.signature.0.len()
    }
}

impl Canonical for Transaction {
    fn encode_into(&self, w: &mut Writer) {
        w.fixed(&self.id.0)
            .fixed(&self.sender.0)
            .bytes(&self.payload)
            .u64(self.timestamp)
            .bytes(&self.signature.0);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            id: Digest256(r.array()?),
            sender: PublicKey(r.array()?),
            payload: r.bytes()?.to_vec(),
            timestamp: r.u64()?,
            signature: Signature(r.bytes()?.to_vec()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_transaction_is_well_formed() {
        let kp = KeyPair::from_seed(1);
        let tx = Transaction::new_signed(&kp, b"pay".to_vec(), 42);
        assert!(tx.is_well_formed());
        assert_eq!(Transaction::from_bytes(&tx.to_bytes()).unwrap(), tx);
        assert_eq!(tx.to_bytes().len(), tx.encoded_len());

        let mut bad = tx.clone();
        bad.payload[0] ^= 1;
        assert!(!bad.is_well_formed());
        let mut forged = tx;
        forged.sender = KeyPair::from_seed(2).public();
        forged.id = forged.computed_id();
        assert!(!forged.is_well_formed());
    }

    #[test]
    fn system_transactions_must_be_unsigned() {
        let marker = Transaction::empty_marker();
        assert!(marker.is_well_formed() && marker.is_empty_marker());
        let mut signed = marker;
        signed.signature = Signature(vec![1]);
        assert!(!signed.is_well_formed());
    }
}

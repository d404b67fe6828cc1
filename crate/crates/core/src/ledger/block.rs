use std::sync::Arc;

use thiserror::Error;

use super::merkle::merkle_root;
use super::tx::Transaction;
use crate::codec::{Canonical, CodecError, Reader, Writer};
use crate::crypto::{hash, verify, Digest256, KeyPair, PublicKey, Signature};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlockError {
    #[error("block carries no transactions")]
    NoTransactions,
    #[error("transaction {0} is malformed or badly signed")]
    BadTransaction(usize),
    #[error("merkle root does not match transactions")]
    BadMerkleRoot,
    #[error("proposer signature does not verify")]
    BadSignature,
    #[error("genesis block has a non-zero field: {0}")]
    BadGenesis(&'static str),
}

/// Encoded header length in bytes.
pub const HEADER_LEN: usize = 136;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockHeader {
    pub height: u64,
    pub prev_hash: Digest256,
    pub merkle_root: Digest256,
    pub proposer_pk: PublicKey,
    pub slot: u64,
    pub dynasty_id: u64,
    pub proposer_credit: u64,
    /// Proof-of-work nonce; zero for every other engine.
    pub nonce: u64,
}

impl BlockHeader {
    pub fn hash(&self) -> Digest256 {
        hash(&self.to_bytes())
    }
}

impl Canonical for BlockHeader {
    fn encode_into(&self, w: &mut Writer) {
        w.u64(self.height)
            .fixed(&self.prev_hash.0)
            .fixed(&self.merkle_root.0)
            .fixed(&self.proposer_pk.0)
            .u64(self.slot)
            .u64(self.dynasty_id)
            .u64(self.proposer_credit)
            .u64(self.nonce);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            height: r.u64()?,
            prev_hash: Digest256(r.array()?),
            merkle_root: Digest256(r.array()?),
            proposer_pk: PublicKey(r.array()?),
            slot: r.u64()?,
            dynasty_id: r.u64()?,
            proposer_credit: r.u64()?,
            nonce: r.u64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub header: BlockHeader,
    /// Shared so that copies of large blocks between nodes stay cheap.
    pub transactions: Arc<Vec<Transaction>>,
    pub proposer_signature: Signature,
}

/// Fields of a new block other than the Merkle root, which is derived.
#[derive(Debug, Clone, Default)]
pub struct BlockTemplate {
    pub height: u64,
    pub prev_hash: Digest256,
    pub slot: u64,
    pub dynasty_id: u64,
    pub proposer_credit: u64,
    pub nonce: u64,
}

impl Block {
    /// Height-0 block with all-zero header fields apart from the Merkle root.
    pub fn genesis(transactions: Vec<Transaction>) -> Self {
        let transactions = if transactions.is_empty() {
            vec![Transaction::empty_marker()]
        } else {
            transactions
        };
        let ids: Vec<Digest256> = transactions.iter().map(|t| t.id).collect();
        let header = BlockHeader {
            height: 0,
            prev_hash: Digest256::ZERO,
            merkle_root: merkle_root(&ids).expect("non-empty"),
            proposer_pk: PublicKey::ZERO,
            slot: 0,
            dynasty_id: 0,
            proposer_credit: 0,
            nonce: 0,
        };
        Self {
            header,
            transactions: Arc::new(transactions),
            proposer_signature: Signature::empty(),
        }
    }

    pub fn build(keys: &KeyPair, t: BlockTemplate, transactions: Vec<Transaction>) -> Self {
        let transactions = if transactions.is_empty() {
            vec![Transaction::empty_marker()]
        } else {
            transactions
        };
        let ids: Vec<Digest256> = transactions.iter().map(|t| t.id).collect();
        let header = BlockHeader {
            height: t.height,
            prev_hash: t.prev_hash,
            merkle_root: merkle_root(&ids).expect("non-empty"),
            proposer_pk: keys.public(),
            slot: t.slot,
            dynasty_id: t.dynasty_id,
            proposer_credit: t.proposer_credit,
            nonce: t.nonce,
        };
        let proposer_signature = keys.sign(&header.hash().0);
        Self {
            header,
            transactions: Arc::new(transactions),
            proposer_signature,
        }
    }

    pub fn hash(&self) -> Digest256 {
        self.header.hash()
    }

    pub fn is_genesis(&self) -> bool {
        self.header.height == 0
    }

    /// Hash links aside, everything checkable from the block alone.
    pub fn validate_structure(&self) -> Result<(), BlockError> {
        if self.transactions.is_empty() {
            return Err(BlockError::NoTransactions);
        }
        let genesis = self.is_genesis();
        for (i, tx) in self.transactions.iter().enumerate() {
            let system_ok = genesis || tx.is_empty_marker();
            if !tx.is_well_formed() || (tx.is_system() && !system_ok) {
                return Err(BlockError::BadTransaction(i));
            }
        }
        let ids: Vec<Digest256> = self.transactions.iter().map(|t| t.id).collect();
        if merkle_root(&ids).ok() != Some(self.header.merkle_root) {
            return Err(BlockError::BadMerkleRoot);
        }
        if genesis {
            let h = &self.header;
            let checks = [
                (h.prev_hash != Digest256::ZERO, "prev_hash"),
                (h.proposer_pk != PublicKey::ZERO, "proposer_pk"),
                (h.slot != 0, "slot"),
                (h.dynasty_id != 0, "dynasty_id"),
                (h.proposer_credit != 0, "proposer_credit"),
                (h.nonce != 0, "nonce"),
                (!self.proposer_signature.is_empty(), "signature"),
            ];
            if let Some((_, field)) = checks.iter().find(|(bad, _)| *bad) {
                return Err(BlockError::BadGenesis(field));
            }
            return Ok(());
        }
        if !verify(
            &self.header.proposer_pk,
            &self.hash().0,
            &self.proposer_signature,
        ) {
            return Err(BlockError::BadSignature);
        }
        Ok(())
    }

    /// Length of the canonical encoding, without building it.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + 4
            + self
                .transactions
                .iter()
                .map(|t| 4 + t.encoded_len())
                .sum::<usize>()
            + 4
            + self.proposer_signature.0.len()
    }

    pub fn payload_bytes(&self) -> usize {
        self.transactions.iter().map(|t| t.payload.len()).sum()
    }
}

impl Canonical for Block {
    fn encode_into(&self, w: &mut Writer) {
        self.header.encode_into(w);
        let count = u32::try_from(self.transactions.len()).expect("too many transactions");
        w.fixed(&count.to_be_bytes());
        for tx in self.transactions.iter() {
            let mut inner = Writer::with_capacity(tx.encoded_len());
            tx.encode_into(&mut inner);
            w.bytes(&inner.finish());
        }
        w.bytes(&self.proposer_signature.0);
    }

    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let header = BlockHeader::decode_from(r)?;
        let count = r.u32()? as usize;
        let mut transactions = Vec::with_capacity(count.min(r.remaining() / 80 + 1));
        for _ in 0..count {
            transactions.push(Transaction::from_bytes(r.bytes()?)?);
        }
        let proposer_signature = Signature(r.bytes()?.to_vec());
        Ok(Self {
            header,
            transactions: Arc::new(transactions),
            proposer_signature,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn child_of(parent: &Block, keys: &KeyPair, slot: u64) -> Block {
        Block::build(
            keys,
            BlockTemplate {
                height: parent.header.height + 1,
                prev_hash: parent.hash(),
                slot,
                ..Default::default()
            },
            vec![Transaction::new_signed(
                keys,
                slot.to_be_bytes().to_vec(),
                slot,
            )],
        )
    }

    #[test]
    fn genesis_golden_vector() {
        let g = Block::genesis(vec![]);
        let bytes = g.to_bytes();
        // header (136) + tx count (4) + one length-prefixed marker tx (4 + 80) + empty signature (4)
        assert_eq!(bytes.len(), 228);
        assert_eq!(g.encoded_len(), 228);
        assert_eq!(
            g.hash().to_hex(),
            "60b50f44496227d8dbbb1ee9ffc1de8e48ebf6551e76b39ba0562291d20a495f"
        );
    }

    #[test]
    fn round_trip_and_nonce_sensitivity() {
        let kp = KeyPair::from_seed(4);
        let b = child_of(&Block::genesis(vec![]), &kp, 1);
        assert_eq!(Block::from_bytes(&b.to_bytes()).unwrap(), b);
        let mut other = b.clone();
        other.header.nonce = 1;
        assert_ne!(other.to_bytes(), b.to_bytes());
        assert_ne!(other.hash(), b.hash());
    }

    #[test]
    fn structural_validation() {
        let kp = KeyPair::from_seed(4);
        let g = Block::genesis(vec![]);
        assert_eq!(g.validate_structure(), Ok(()));
        let b = child_of(&g, &kp, 1);
        assert_eq!(b.validate_structure(), Ok(()));

        let mut wrong_root = b.clone();
        wrong_root.header.merkle_root = Digest256([7; 32]);
        assert_eq!(
            wrong_root.validate_structure(),
            Err(BlockError::BadMerkleRoot)
        );

        let mut resigned = b.clone();
        resigned.header.slot = 9;
        assert_eq!(resigned.validate_structure(), Err(BlockError::BadSignature));

        let mut sneaky = b;
        Arc::make_mut(&mut sneaky.transactions).push(Transaction::system(b"mint".to_vec(), 1));
        assert_eq!(
            sneaky.validate_structure(),
            Err(BlockError::BadTransaction(1))
        );

        let mut bad_genesis = g;
        bad_genesis.header.slot = 1;
        assert_eq!(
            bad_genesis.validate_structure(),
            Err(BlockError::BadGenesis("slot"))
        );
    }
}

use thiserror::Error;

use crate::crypto::{hash_parts, Digest256};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("merkle root of an empty transaction list")]
pub struct MerkleError;

/// Bottom-up binary Merkle root; an odd node at any level is paired with itself.
pub fn merkle_root(leaves: &[Digest256]) -> Result<Digest256, MerkleError> {
    if leaves.is_empty() {
        return Err(MerkleError);
    }
    let mut level: Vec<Digest256> = leaves.to_vec();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| {
                let right = pair.get(1).unwrap_or(&pair[0]);
                hash_parts(&[&pair[0].0, &right.0])
            })
            .collect();
    }
    Ok(level[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;

    fn node(a: &Digest256, b: &Digest256) -> Digest256 {
        let mut buf = a.0.to_vec();
        buf.extend_from_slice(&b.0);
        hash(&buf)
    }

    #[test]
    fn small_trees_by_hand_expansion() {
        let h: Vec<Digest256> = (0u8..5).map(|i| hash(&[i])).collect();
        assert_eq!(merkle_root(&h[..1]), Ok(h[0]));
        assert_eq!(merkle_root(&h[..2]), Ok(node(&h[0], &h[1])));
        assert_eq!(
            merkle_root(&h[..3]),
            Ok(node(&node(&h[0], &h[1]), &node(&h[2], &h[2])))
        );
        let left = node(&node(&h[0], &h[1]), &node(&h[2], &h[3]));
        let right = node(&node(&h[4], &h[4]), &node(&h[4], &h[4]));
        assert_eq!(merkle_root(&h), Ok(node(&left, &right)));
    }

    #[test]
    fn empty_is_an_error() {
        assert_eq!(merkle_root(&[]), Err(MerkleError));
    }
}

//! Shamir sharing over the prime field of order `2^256 + 297` with hash
//! commitments, which is enough public verifiability for a simulated
//! RandShare round. The field is one bit wider than a digest so every
//! 256-bit secret is a field element.

use std::sync::OnceLock;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{hash_parts, Digest256};

pub const SHARE_LEN: usize = 33;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PvssError {
    #[error("invalid parameters: need 1 <= t <= n, got n={n} t={t}")]
    InvalidParams { n: usize, t: usize },
    #[error("insufficient shares: {distinct} distinct, threshold {threshold}")]
    InsufficientShares { distinct: usize, threshold: usize },
    #[error("shares are inconsistent and do not interpolate to a secret")]
    Inconsistent,
}

/// One evaluation `f(index)`; indices start at 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PvssShare {
    pub index: u32,
    pub value: Vec<u8>,
}

impl PvssShare {
    pub fn commitment(&self) -> Digest256 {
        hash_parts(&[b"pvss-share", &self.index.to_be_bytes(), &self.value])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PvssDeal {
    pub n: usize,
    pub t: usize,
    pub shares: Vec<PvssShare>,
    pub commitments: Vec<Digest256>,
}

fn modulus() -> &'static BigUint {
    static P: OnceLock<BigUint> = OnceLock::new();
    P.get_or_init(|| (BigUint::from(1u8) << 256) + BigUint::from(297u32))
}

fn to_fixed(x: &BigUint) -> Vec<u8> {
    let raw = x.to_bytes_be();
    let mut out = vec![0u8; SHARE_LEN - raw.len()];
    out.extend_from_slice(&raw);
    out
}

fn random_element<R: Rng + ?Sized>(rng: &mut R) -> BigUint {
    let mut bytes = [0u8; 40];
    rng.fill(&mut bytes[..]);
    BigUint::from_bytes_be(&bytes) % modulus()
}

fn inverse(x: &BigUint) -> BigUint {
    let p = modulus();
    x.modpow(&(p - BigUint::from(2u8)), p)
}

/// Splits `secret` into `n` shares, any `t` of which recover it.
pub fn pvss_deal<R: Rng + ?Sized>(
    secret: &Digest256,
    n: usize,
    t: usize,
    rng: &mut R,
) -> Result<PvssDeal, PvssError> {
    if t == 0 || t > n || n > u32::MAX as usize {
        return Err(PvssError::InvalidParams { n, t });
    }
    let p = modulus();
    let mut coeffs = Vec::with_capacity(t);
    coeffs.push(BigUint::from_bytes_be(&secret.0));
    for _ in 1..t {
        coeffs.push(random_element(rng));
    }
    let shares: Vec<PvssShare> = (1..=n as u32)
        .map(|index| {
            let x = BigUint::from(index);
            // Horner evaluation from the highest coefficient down.
            let y = coeffs
                .iter()
                .rev()
                .fold(BigUint::default(), |acc, c| (acc * &x + c) % p);
            PvssShare {
                index,
                value: to_fixed(&y),
            }
        })
        .collect();
    let commitments = shares.iter().map(PvssShare::commitment).collect();
    Ok(PvssDeal {
        n,
        t,
        shares,
        commitments,
    })
}

/// Checks share `index` (1-based) of a deal against the deal's commitments.
pub fn pvss_verify_share(deal: &PvssDeal, index: u32) -> bool {
    let slot = index as usize;
    if slot == 0 || slot > deal.shares.len() || slot > deal.commitments.len() {
        return false;
    }
    let share = &deal.shares[slot - 1];
    share.index == index && share_matches(&deal.commitments, share)
}

/// Checks a revealed share against published commitments alone.
pub fn share_matches(commitments: &[Digest256], share: &PvssShare) -> bool {
    let slot = share.index as usize;
    share.value.len() == SHARE_LEN
        && slot >= 1
        && slot <= commitments.len()
        && commitments[slot - 1] == share.commitment()
}

/// Lagrange interpolation at zero over the first `t` distinct indices.
pub fn pvss_recover(shares: &[PvssShare], t: usize) -> Result<Digest256, PvssError> {
    let mut chosen: Vec<&PvssShare> = Vec::with_capacity(t);
    for s in shares {
        if s.index != 0 && !chosen.iter().any(|c| c.index == s.index) {
            chosen.push(s);
        }
    }
    if t == 0 || chosen.len() < t {
        return Err(PvssError::InsufficientShares {
            distinct: chosen.len(),
            threshold: t,
        });
    }
    chosen.truncate(t);
    let p = modulus();
    let mut secret = BigUint::default();
    for (i, si) in chosen.iter().enumerate() {
        let xi = BigUint::from(si.index);
        let mut num = BigUint::from(1u8);
        let mut den = BigUint::from(1u8);
        for (j, sj) in chosen.iter().enumerate() {
            if i == j {
                continue;
            }
            let xj = BigUint::from(sj.index);
            num = num * &xj % p;
            den = den * ((&xj + p - &xi) % p) % p;
        }
        let yi = BigUint::from_bytes_be(&si.value) % p;
        secret = (secret + yi * num % p * inverse(&den)) % p;
    }
    let bytes = secret.to_bytes_be();
    if bytes.len() > 32 {
        return Err(PvssError::Inconsistent);
    }
    let mut out = [0u8; 32];
    out[32 - bytes.len()..].copy_from_slice(&bytes);
    Ok(Digest256(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        if n < k {
            return vec![];
        }
        let mut with_last: Vec<Vec<usize>> = subsets(n - 1, k - 1)
            .into_iter()
            .map(|mut s| {
                s.push(n - 1);
                s
            })
            .collect();
        with_last.extend(subsets(n - 1, k));
        with_last
    }

    #[test]
    fn every_threshold_subset_recovers_up_to_eight() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for n in 1..=8 {
            for t in 1..=n {
                let secret = hash(&[n as u8, t as u8]);
                let deal = pvss_deal(&secret, n, t, &mut rng).unwrap();
                for subset in subsets(n, t) {
                    let picked: Vec<PvssShare> =
                        subset.iter().map(|&i| deal.shares[i].clone()).collect();
                    assert_eq!(
                        pvss_recover(&picked, t).unwrap(),
                        secret,
                        "n={n} t={t} {subset:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn max_secret_fits_field() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let secret = Digest256([0xff; 32]);
        let deal = pvss_deal(&secret, 5, 3, &mut rng).unwrap();
        assert_eq!(pvss_recover(&deal.shares[2..], 3).unwrap(), secret);
    }

    #[test]
    fn too_few_or_duplicate_shares() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let deal = pvss_deal(&hash(b"s"), 5, 3, &mut rng).unwrap();
        assert_eq!(
            pvss_recover(&deal.shares[..2], 3),
            Err(PvssError::InsufficientShares {
                distinct: 2,
                threshold: 3
            })
        );
        let dup = vec![
            deal.shares[0].clone(),
            deal.shares[0].clone(),
            deal.shares[1].clone(),
        ];
        assert!(matches!(
            pvss_recover(&dup, 3),
            Err(PvssError::InsufficientShares { .. })
        ));
    }

    #[test]
    fn invalid_params() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        assert!(pvss_deal(&hash(b"s"), 3, 0, &mut rng).is_err());
        assert!(pvss_deal(&hash(b"s"), 3, 4, &mut rng).is_err());
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let deal = pvss_deal(&hash(b"fixture"), 5, 3, &mut rng).unwrap();
        for idx in 1..=5u32 {
            assert!(pvss_verify_share(&deal, idx));
            for byte in 0..SHARE_LEN {
                for mask in [0x01u8, 0x80, 0xff] {
                    let mut tampered = deal.clone();
                    tampered.shares[idx as usize - 1].value[byte] ^= mask;
                    assert!(!pvss_verify_share(&tampered, idx));
                }
            }
        }
        assert!(!pvss_verify_share(&deal, 0));
        assert!(!pvss_verify_share(&deal, 6));
    }
}

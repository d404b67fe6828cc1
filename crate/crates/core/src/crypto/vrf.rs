use serde::{Deserialize, Serialize};

use super::{hash, verify, KeyPair, PublicKey, Signature};

/// VRF output: `value / 2^64` is a uniform fraction; `proof` is the signature
/// it was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VrfOutput {
    pub value: u64,
    pub proof: Signature,
}

impl VrfOutput {
    pub fn fraction(&self) -> f64 {
        self.value as f64 / 2f64.powi(64)
    }
}

pub fn vrf_evaluate(keys: &KeyPair, input: &[u8]) -> VrfOutput {
    let proof = keys.sign(input);
    VrfOutput {
        value: hash(&proof.0).prefix_u64(),
        proof,
    }
}

pub fn vrf_verify(pk: &PublicKey, input: &[u8], out: &VrfOutput) -> bool {
    verify(pk, input, &out.proof) && hash(&out.proof.0).prefix_u64() == out.value
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_verifiable() {
        let kp = KeyPair::from_seed(5);
        let a = vrf_evaluate(&kp, b"seed");
        assert_eq!(a, vrf_evaluate(&kp, b"seed"));
        assert!(vrf_verify(&kp.public(), b"seed", &a));
    }

    #[test]
    fn proof_for_other_input_rejected() {
        let kp = KeyPair::from_seed(5);
        let inputs: Vec<Vec<u8>> = (0u8..8).map(|i| vec![i; i as usize + 1]).collect();
        for (i, a) in inputs.iter().enumerate() {
            let out = vrf_evaluate(&kp, a);
            for (j, b) in inputs.iter().enumerate() {
                assert_eq!(vrf_verify(&kp.public(), b, &out), i == j);
            }
        }
    }

    #[test]
    fn tampered_value_rejected() {
        let kp = KeyPair::from_seed(5);
        let mut out = vrf_evaluate(&kp, b"x");
        out.value ^= 1;
        assert!(!vrf_verify(&kp.public(), b"x", &out));
    }
}

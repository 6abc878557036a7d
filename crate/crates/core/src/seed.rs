//! Deterministic seed derivation.

use sha2::{Digest, Sha256};

use crate::model::ParamMap;

/// Mixes a run seed with labelled byte strings into a 64-bit seed.
pub fn derive(run_seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

/// Training seed for a (morphology, reward) pair, derived from their
/// content so that re-evaluating an identical pair reproduces its result.
pub fn for_pair(run_seed: u64, values: &ParamMap, reward_source: &str) -> u64 {
    let mut h = Sha256::new();
    for (k, v) in values {
        h.update(k.as_bytes());
        h.update([0]);
        h.update(v.to_bits().to_le_bytes());
    }
    let values_digest = h.finalize();
    derive(run_seed, &[b"pair", &values_digest, reward_source.as_bytes()])
}

//! Deterministic RNG stream derivation.
//!
//! Every random decision in the pipeline draws from a stream derived from
//! `(master seed, domain label, indices)`. Streams are independent by
//! construction (the derivation hashes the full context), so adding a
//! consumer in one place never perturbs draws elsewhere — this is what makes
//! run artifacts byte-reproducible across repeated invocations.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a named RNG stream from the master seed.
///
/// `label` names the consumer ("usap", "offline-actions", ...); `indices`
/// pins the instance (epoch, sample id, scene id, ...).
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0xff]); // separator between seed and label
    h.update(label.as_bytes());
    for ix in indices {
        h.update([0xfe]);
        h.update(ix.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(7, "usap", &[3, 1]);
        let mut b = stream(7, "usap", &[3, 1]);
        for _ in 0..32 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn streams_differ_across_labels_and_indices() {
        let mut base = stream(7, "usap", &[3]);
        let mut other_label = stream(7, "noise", &[3]);
        let mut other_index = stream(7, "usap", &[4]);
        let mut other_seed = stream(8, "usap", &[3]);
        let x: u64 = base.gen();
        assert_ne!(x, other_label.gen::<u64>());
        assert_ne!(x, other_index.gen::<u64>());
        assert_ne!(x, other_seed.gen::<u64>());
    }

    #[test]
    fn index_boundaries_do_not_collide() {
        // ("ab", [1]) must differ from ("a", [0x62...?]) style confusions:
        // the separators make label/index framing unambiguous.
        let mut a = stream(7, "ab", &[1]);
        let mut b = stream(7, "a", &[0x62, 1]);
        assert_ne!(a.gen::<u64>(), b.gen::<u64>());
    }
}

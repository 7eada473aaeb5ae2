//! Per-purpose random streams derived from one master seed.
//!
//! Every stochastic stage asks for its own stream by name and index, so results
//! do not depend on the order in which parallel work completes.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha20Rng;

/// Derive an independent stream for `(master, purpose, index)`.
pub fn stream(master: u64, purpose: &str, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let seed: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(seed)
}

/// Derive a child seed for components that take a plain seed.
///
/// The result fits in 63 bits so it round-trips through TOML integers.
pub fn child_seed(master: u64, purpose: &str, index: u64) -> u64 {
    use rand::RngCore;
    stream(master, purpose, index).next_u64() >> 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = stream(7, "noise", 0).sample_iter(rand::distributions::Standard).take(4).collect();
        let b: Vec<u64> = stream(7, "noise", 0).sample_iter(rand::distributions::Standard).take(4).collect();
        let c: Vec<u64> = stream(7, "noise", 1).sample_iter(rand::distributions::Standard).take(4).collect();
        let d: Vec<u64> = stream(7, "lhs", 0).sample_iter(rand::distributions::Standard).take(4).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn child_seeds_fit_signed_integers() {
        for i in 0..64 {
            assert!(child_seed(u64::MAX, "x", i) <= i64::MAX as u64);
        }
    }
}

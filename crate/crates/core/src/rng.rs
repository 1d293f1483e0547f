//! Seed derivation for reproducible experiments.
//!
//! Every random stream is keyed by `(master seed, purpose tag, index path)` and hashed
//! into a ChaCha seed, so adding trials or sample sizes never shifts existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha20Rng;

/// 256-bit seed for the stream identified by `(master, tag, path)`.
pub fn derive_seed(master: u64, tag: &str, path: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"deconv-lab/rng/v1");
    hasher.update(master.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    for idx in path {
        hasher.update(idx.to_le_bytes());
    }
    hasher.finalize().into()
}

pub fn stream(master: u64, tag: &str, path: &[u64]) -> SimRng {
    SimRng::from_seed(derive_seed(master, tag, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let a: u64 = stream(7, "trial", &[1, 2]).random();
        let b: u64 = stream(7, "trial", &[1, 2]).random();
        let c: u64 = stream(7, "trial", &[1, 3]).random();
        let d: u64 = stream(7, "target", &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn tag_and_path_do_not_alias() {
        // "ab" + [] must not collide with "a" + ['b'-ish] encodings
        assert_ne!(derive_seed(1, "ab", &[]), derive_seed(1, "a", &[0x62]));
    }
}

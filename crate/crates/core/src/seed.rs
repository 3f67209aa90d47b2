//! Seed derivation. A parent seed and a stage label hash to a child seed:
//! `child = le_u64(sha256(le_bytes(parent) || label)[..8])`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Follows a chain of labels from `root`.
pub fn derive_path(root: u64, labels: &[&str]) -> u64 {
    labels.iter().fold(root, |s, l| derive_seed(s, l))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_separate_streams() {
        assert_ne!(derive_seed(1, "codec"), derive_seed(1, "generator"));
        assert_ne!(derive_seed(1, "codec"), derive_seed(2, "codec"));
        assert_eq!(derive_path(5, &["a", "b"]), derive_seed(derive_seed(5, "a"), "b"));
    }
}

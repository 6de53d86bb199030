//! Hierarchical seed derivation: one root seed, independent named streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Seed for the child stream `label` of `parent`.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update(label.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(parent: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, label))
}

/// Stream for the `index`-th item under `parent`, e.g. one test episode.
pub fn indexed_rng(parent: u64, index: usize) -> ChaCha8Rng {
    rng_for(parent, &format!("#{index}"))
}

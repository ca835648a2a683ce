//! Seed management.
//!
//! Every run derives all of its randomness from a single 64-bit root
//! seed through named sub-streams, so datasets, weight init, noise and
//! transform sampling can be varied independently while staying
//! reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG for the sub-stream `name` of a root seed.
pub fn substream(root: u64, name: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(seed)
}

/// Sub-seed for spawning an independent run (e.g. resampling a diverged
/// trajectory with the "next" seed).
pub fn subseed(root: u64, name: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

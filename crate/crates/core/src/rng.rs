//! Seed derivation. Every random stream in the crate is
//! `ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose))`, where
//! `derive_seed` takes the first eight bytes (little-endian) of
//! `SHA-256(seed.to_le_bytes() || purpose)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng_for(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose))
}

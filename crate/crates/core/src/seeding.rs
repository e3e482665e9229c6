//! Per-component seed derivation.
//!
//! Every random stream is seeded with the first 8 bytes (little endian) of
//! `SHA-256(root_seed.to_le_bytes() || component_name)`. Streams with
//! different names are independent and never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(root: u64, component: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(component.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn component_rng(root: u64, component: &str) -> Rng {
    rng_from_seed(derive_seed(root, component))
}

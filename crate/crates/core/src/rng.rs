//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives an independent seed for `(root, name, index)`.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn substream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name, 0))
}

pub fn indexed_stream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name, index))
}

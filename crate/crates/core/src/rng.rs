//! Seed fan-out. Every source of randomness in the pipeline is a named
//! substream of one root seed, so runs are reproducible end to end and
//! stages can be re-executed in isolation without perturbing each other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG for a named substream of `root`.
///
/// The stream is keyed by SHA-256 of the root seed and the stream name, so
/// adding new streams never shifts existing ones.
pub fn substream(root: u64, name: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

/// Substream further keyed by an integer index (e.g. per identity, per step).
pub fn substream_indexed(root: u64, name: &str, index: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

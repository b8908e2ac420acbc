//! Deterministic per-use RNG streams.
//!
//! Every random draw in the crate comes from a stream derived as
//! `hash(global_seed, purpose, index)`, so independent pipeline stages never
//! share or race on a global generator, and parallel execution produces the
//! same streams as sequential execution.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Algorithm tag recorded in checkpoints and manifests.
pub const RNG_ALGORITHM: &str = "sha256/chacha8";

/// Derives an independent RNG stream from a global seed, a purpose tag, and
/// a per-use index. Identical arguments always yield an identical stream.
pub fn derive_rng(global_seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(purpose.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

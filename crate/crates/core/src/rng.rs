//! Deterministic random-stream derivation.
//!
//! Every stochastic choice in the crate (parameter init, scene sampling,
//! per-step training noise, per-image sampling noise) draws from a ChaCha
//! stream whose 256-bit key is derived by hashing a domain label, a base seed,
//! and the indices that identify the consumer. Streams are therefore
//! independent of each other, of iteration order, and of thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The stream type used everywhere randomness is needed.
pub type Stream = ChaCha8Rng;

/// Derives an independent stream from `(domain, seed, indices)`.
pub fn stream(domain: &str, seed: u64, indices: &[u64]) -> Stream {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update(seed.to_le_bytes());
    for ix in indices {
        h.update(ix.to_le_bytes());
    }
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

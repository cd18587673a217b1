//! Deterministic random streams.
//!
//! Every stochastic event derives its own ChaCha8 stream from the run seed, a
//! domain tag, and event coordinates (step, clip index, ...). Streams are
//! independent of execution order and thread count, which is what makes
//! training resumable and bit-reproducible: the batch drawn at step `s` is a
//! pure function of `(seed, s)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for unrelated purposes disjoint even when their
/// coordinates collide.
pub mod domain {
    /// Parameter initialization.
    pub const INIT: u64 = 1;
    /// Puzzle sampling during pretraining (coords: step, slot).
    pub const PUZZLE: u64 = 2;
    /// Synthetic clip generation (coords: pair, clip index).
    pub const DATAGEN: u64 = 3;
    /// Fine-tuning batches and augmentation (coords: step, slot).
    pub const FINETUNE: u64 = 4;
    /// Statistics and test draws.
    pub const TEST: u64 = 5;
}

/// Builds an independent ChaCha8 stream keyed by four 64-bit parts.
pub fn stream(parts: [u64; 4]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, p) in parts.iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&p.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

//! Seeded random number generation.
//!
//! Every generator in the crate draws from `ChaCha8Rng` seeded through
//! `seed_from_u64`, so outputs are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a sub-task (instance `index` of a sweep).
pub fn derive(seed: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}

/// The seed behind [`derive`].
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer so nearby (seed, index) pairs decorrelate
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

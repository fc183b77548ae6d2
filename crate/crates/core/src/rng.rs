//! Seed derivation. Every stochastic component draws from its own
//! `ChaCha8Rng` seeded by mixing a base seed with integer tags, so streams
//! are independent of the order in which other components consume randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags.
pub mod tag {
    pub const WORLD: u64 = 1;
    pub const RECORD: u64 = 2;
    pub const INIT: u64 = 3;
    pub const BATCH_ORDER: u64 = 4;
    pub const MASKING: u64 = 5;
    pub const SAMPLING: u64 = 6;
    pub const SWITCH: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const HEAD_INIT: u64 = 9;
    pub const FINETUNE: u64 = 10;
}

//! Seed derivation helpers.
//!
//! Every stochastic step in the crate draws from a [`ChaCha8Rng`] seeded by
//! mixing the run seed with a stream tag, so independent streams (data
//! generation, initialization, per-epoch shuffles) never share state and can
//! be reproduced individually, e.g. when resuming from a checkpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a sequence of stream tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

pub(crate) mod tag {
    pub const DATA_MEANS: u64 = 1;
    pub const DATA_TRAIN: u64 = 2;
    pub const DATA_TEST: u64 = 3;
    pub const SUBSAMPLE: u64 = 4;
    pub const INIT: u64 = 10;
    pub const HEAD_REINIT: u64 = 11;
    pub const SHUFFLE_STAGE1: u64 = 20;
    pub const SHUFFLE_STAGE2: u64 = 21;
}

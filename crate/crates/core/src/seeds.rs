//! Seed derivation for independent, reproducible RNG streams.
//!
//! Every random decision in a run draws from a stream keyed by a tuple such as
//! `(master_seed, iteration, tag)`, so adding or reordering draws in one place
//! never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags mixed into derived seeds.
pub mod tag {
    pub const LABELS: u64 = 0x4c41_4245;
    pub const EDGE_ORDER: u64 = 0x4544_4745;
    pub const POOL: u64 = 0x504f_4f4c;
    pub const BACKEND: u64 = 0x4241_434b;
    pub const PROMPT: u64 = 0x5052_4f4d;
    pub const RESTART: u64 = 0x5245_5354;
    pub const CALIBRATE: u64 = 0x4341_4c49;
    pub const RUN: u64 = 0x5255_4e53;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds the parts into a single 64-bit seed. Order matters.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

//! Deterministic RNG streams derived from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of stream identifiers.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Independent generator for `(seed, path...)`; identical inputs give identical streams.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream labels, so unrelated consumers of one seed never share a stream.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const LOSS_DRAWS: u64 = 4;
    pub const VALIDATION: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const MC_PASS: u64 = 7;
    pub const ALEATORIC: u64 = 8;
    pub const TWINS: u64 = 9;
    pub const CONDITION: u64 = 10;
    pub const CLASS_ORDER: u64 = 11;
}

//! Seed derivation. Every stochastic stage draws from its own ChaCha stream
//! keyed by the global seed plus stage-specific coordinates, so results do
//! not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of coordinates into a new seed.
pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, coords))
}

/// Stage tags used as the first coordinate of derived streams.
pub mod tag {
    pub const SYNTH_STACK: u64 = 1;
    pub const SYNTH_SLICE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const DROPOUT: u64 = 7;
    pub const BASELINE: u64 = 8;
}

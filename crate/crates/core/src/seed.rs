//! Seed derivation for independent, order-insensitive RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used when deriving per-purpose seeds from a global seed.
pub mod stream {
    pub const SPLIT: u64 = 0x5350_4c49;
    pub const SERVER_CLIENT: u64 = 0x5345_5256;
    pub const CLIENT_SHARES: u64 = 0x4348_5253;
    pub const INIT: u64 = 0x494e_4954;
    pub const BOOTSTRAP: u64 = 0x424f_4f54;
    pub const CLIENT_TRAIN: u64 = 0x434c_4e54;
    pub const BASELINE: u64 = 0x4241_5345;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `base` with each component in order. Different component lists give
/// statistically independent seeds.
pub fn derive(base: u64, components: &[u64]) -> u64 {
    components
        .iter()
        .fold(splitmix64(base), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

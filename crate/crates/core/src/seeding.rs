//! Scheduling-independent seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a global seed, a stream tag and an index into one seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Named streams so unrelated consumers never share random numbers.
pub mod stream {
    pub const TRAIN_BOX: u64 = 1;
    pub const TRAIN_IMAGE: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const RENDER: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const SAMPLING: u64 = 6;
}

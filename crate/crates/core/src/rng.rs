use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags separating the random streams drawn from one run seed.
pub(crate) mod stream {
    pub const BLOB_CENTERS: u64 = 1;
    pub const BLOB_SAMPLES: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const NOISY_ORDER: u64 = 5;
    pub const CLEAN_ORDER: u64 = 6;
    pub const TRAIN_ORDER: u64 = 7;
    pub const INIT: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a path of tags.
pub(crate) fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub(crate) fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

//! Stateless seed derivation, so every random stream is addressable by
//! `(seed, purpose, index)` without carrying generator state.

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `index` for `purpose` under the base seed.
pub fn derive(seed: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(purpose)) ^ index)
}

/// Seed of the `index`-th generated sample.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    derive(seed, purpose::SAMPLE, index)
}

pub(crate) mod purpose {
    pub const EPOCH_ORDER: u64 = 1;
    pub const STEP_NOISE: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const SPLIT: u64 = 5;
}

//! Seed derivation. Every random draw in the pipeline comes from a
//! `ChaCha8Rng` keyed by a base seed plus a stream path, so independent
//! consumers never share state and results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `stream` into `seed`, yielding a well-separated child seed.
pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn derive_path(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &p| derive(s, p))
}

pub fn rng_from(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_path(seed, path))
}

// Stream tags. Values are arbitrary but frozen: changing one changes every
// corpus and checkpoint produced downstream.
pub(crate) mod stream {
    pub const SCENE: u64 = 1;
    pub const SURFACE: u64 = 2;
    pub const PAIRS: u64 = 3;
    pub const DIFFUSION_T: u64 = 4;
    pub const DIFFUSION_EPS: u64 = 5;
    pub const SAMPLER: u64 = 6;
    pub const ENCODER_INIT: u64 = 7;
    pub const DENOISER_INIT: u64 = 8;
    pub const HEAD_INIT: u64 = 9;
    pub const BC_BATCH: u64 = 10;
    pub const EPISODE: u64 = 11;
    pub const EVAL_PAIRS: u64 = 12;
    pub const RANDOM_POLICY: u64 = 13;
    pub const HELD_OUT: u64 = 14;
}

//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by `(base_seed, stream, index)` so the
//! numbers a work item sees never depend on how many workers share the load.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used by the samplers and generators.
pub mod stream {
    pub const REFERENCE_FIELD: u64 = 1;
    pub const WELLS_Y: u64 = 2;
    pub const WELLS_U: u64 = 3;
    pub const MC_PRIOR: u64 = 4;
    pub const RPICKLE_NOISE: u64 = 5;
    pub const METROPOLIS: u64 = 6;
    pub const HMC_CHAIN: u64 = 7;
    pub const ORACLE: u64 = 8;
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives the seed for item `index` of `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

/// RNG for item `index` of `stream` under `base`.
pub fn rng_for(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

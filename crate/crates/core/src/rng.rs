//! Seed derivation for independent, order-insensitive random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] built by
//! [`rng_from_seed`]. Replicates and sub-tasks get their own seed through
//! [`derive_seed`], which hashes `(base, path...)` with SplitMix64 so that
//! replicate `r` sees the same stream whatever order replicates run in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type PsarRng = ChaCha8Rng;

/// Stream tags used when one logical seed feeds several draws.
pub mod tag {
    pub const NETWORK: u64 = 1;
    pub const COVARIATES: u64 = 2;
    pub const MODEL_ERROR: u64 = 3;
    pub const PRIVACY_NOISE: u64 = 4;
    pub const BOOTSTRAP: u64 = 5;
    pub const PERTURB: u64 = 6;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0xA5A5))))
}

pub fn rng_from_seed(seed: u64) -> PsarRng {
    ChaCha8Rng::seed_from_u64(seed)
}

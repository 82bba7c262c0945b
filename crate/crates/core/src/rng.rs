//! Seeded randomness. Every stochastic step in the crate draws from a
//! ChaCha8 stream keyed by an explicit u64 seed, so identical seeds give
//! identical artifacts on any platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a base seed and stream indices
/// (splitmix64 finalizer over the mixed words).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut x = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Standard normal draw via Box-Muller (consumes two uniforms per call).
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

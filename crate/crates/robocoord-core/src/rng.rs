//! Seeded sampling helpers on top of `rand_core`.
//!
//! The simulator only needs uniform, normal, and exponential draws, computed
//! here with libm so the whole pipeline stays `no_std` and bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_core::RngCore;

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub(crate) fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-stream RNG derived from the scenario seed, a vehicle
/// id, and a stream tag, so draws do not depend on event interleaving.
pub(crate) fn derived_rng(seed: u64, cav: u32, tag: u64) -> ChaCha8Rng {
    let a = mix64(seed ^ mix64(tag));
    let b = mix64(a ^ u64::from(cav));
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..32].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw in the half-open interval (0, 1].
pub(crate) fn uniform_open01(rng: &mut impl RngCore) -> f64 {
    (((rng.next_u64() >> 11) + 1) as f64) * (1.0 / 9_007_199_254_740_992.0)
}

/// Uniform draw in `[lo, hi)`.
pub(crate) fn uniform_in(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64) * (1.0 / 9_007_199_254_740_992.0);
    lo + (hi - lo) * u
}

/// Standard normal draw (Box-Muller).
pub(crate) fn standard_normal(rng: &mut impl RngCore) -> f64 {
    let u1 = uniform_open01(rng);
    let u2 = uniform_open01(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

/// Exponential draw with the given rate (events per unit time).
pub(crate) fn exponential(rng: &mut impl RngCore, rate: f64) -> f64 {
    -libm::log(uniform_open01(rng)) / rate
}

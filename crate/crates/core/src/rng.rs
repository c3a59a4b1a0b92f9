//! Deterministic random streams.
//!
//! Every stochastic routine takes an explicit generator. Work that is split
//! across samples derives one ChaCha stream per sample index so that results
//! do not depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::C64;

pub type SimRng = ChaCha8Rng;

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a fresh 64-bit seed from a parent generator.
pub fn child_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.random()
}

/// Circularly symmetric complex normal with unit variance: real and
/// imaginary parts are independent N(0, 1/2).
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

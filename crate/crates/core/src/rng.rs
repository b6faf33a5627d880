//! Deterministic random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (the `rand_chacha`
//! implementation of the ChaCha stream cipher with 8 rounds), keyed by a
//! 64-bit seed through `SeedableRng::seed_from_u64` and split into
//! independent streams with the cipher's 64-bit stream id. Normal variates
//! use the `rand_distr` ziggurat sampler for `StandardNormal`; uniforms use
//! `rand`'s `Standard` distribution on `[0, 1)`.
//!
//! A stream is identified by `(seed, domain, index)`. The domain separates
//! unrelated consumers (prior noise vs. timesteps vs. dataset samples) so
//! adding a draw in one place never shifts the draws seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Stream domains. The numeric values are part of the reproducibility
/// contract and must not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Raw = 0,
    Prior = 1,
    Timestep = 2,
    Dataset = 3,
    Batch = 4,
    Init = 5,
    Sampler = 6,
    Lora = 7,
}

/// Build the generator for one `(seed, domain, index)` stream.
pub fn stream(seed: u64, domain: Domain, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 8 bits of domain, 56 bits of index.
    rng.set_stream(((domain as u64) << 56) | (index & ((1u64 << 56) - 1)));
    rng
}

pub fn normal_vec(rng: &mut StreamRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn uniform(rng: &mut StreamRng) -> f64 {
    rng.gen::<f64>()
}

/// Mix two words into a child seed (SplitMix64 finalizer).
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

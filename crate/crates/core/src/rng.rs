//! Seeded random streams.
//!
//! Every random quantity comes from ChaCha8 keyed by a user seed. Independent
//! consumers select distinct ChaCha stream ids, so e.g. band `n` of a noise
//! field always draws from stream `n` no matter which bands are generated or
//! in what order. Gaussian variates use the ziggurat sampler of `rand_distr`
//! (`StandardNormal`) on top of that stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream ids reserved for non-band consumers; band substreams use `0..B`.
pub(crate) mod streams {
    pub const SIGMA_DRAWS: u64 = 1 << 62;
    pub const PARAM_INIT: u64 = (1 << 62) + 1;
    pub const SHUFFLE_BASE: u64 = 1 << 61;
}

pub(crate) fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Mixes two words into one seed (SplitMix64 finaliser), for deriving
/// per-item seeds such as the noise seed of the i-th augmented cube.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

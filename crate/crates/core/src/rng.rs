//! Reproducible random streams.
//!
//! Every draw in the crate goes through [`RngStream`], a ChaCha8 generator
//! keyed by a 64-bit seed and a 64-bit stream id. ChaCha is counter based, so
//! `(seed, stream)` fixes the whole sequence and distinct stream ids give
//! independent sequences without any coordination between threads.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw on the open interval (0, 1); both endpoints are excluded.
    #[inline]
    pub fn uniform_open(&mut self) -> f64 {
        self.rng.sample(Open01)
    }

    /// Unit exponential by inversion, `-ln U`.
    #[inline]
    pub fn exponential(&mut self) -> f64 {
        -self.uniform_open().ln()
    }

    /// Standard Gumbel, `-ln(-ln U)`.
    #[inline]
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Mixes a label into a seed (SplitMix64 finalizer), for deriving independent
/// seeds for experiment cells such as grid points or temperatures.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

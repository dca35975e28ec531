//! Counter-derived random streams.
//!
//! Every stochastic decision in the crate draws from a stream keyed by
//! `(seed, lane, epoch, index)`. Streams never share state, so the draws a
//! sample sees do not depend on how many other samples were processed before
//! it or on which worker processes it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tag that keeps streams for different consumers disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Lane {
    WeakView = 1,
    StrongView = 2,
    SecondView = 3,
    Shuffle = 4,
    Init = 5,
    Synthetic = 6,
    Preview = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the stream key into a single 64-bit ChaCha seed.
pub fn derive_seed(seed: u64, lane: Lane, epoch: u64, index: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ lane as u64);
    h = splitmix64(h ^ epoch);
    splitmix64(h ^ index)
}

/// A deterministic random stream for one `(seed, lane, epoch, index)` key.
#[derive(Clone, Debug)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, lane: Lane, epoch: u64, index: u64) -> Self {
        RngStream {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, lane, epoch, index)),
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.rng.random_range(0..n)
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        StandardNormal.sample(&mut self.rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

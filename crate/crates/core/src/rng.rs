//! Counter-based random streams.
//!
//! Every consumer of randomness holds a [`RandomSource`] keyed by
//! `(seed, stream_key)`. Streams with distinct keys are independent and
//! order-free: batch-parallel code that gives each sample its own key
//! produces exactly the sequential result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Reserved stream key for parameter initialization.
pub const STREAM_INIT: u64 = 1 << 63;

/// Stream key for the shuffle of a given epoch.
pub fn shuffle_stream(epoch: usize) -> u64 {
    (1 << 62) | epoch as u64
}

/// Stream key for per-sample noise draws within an epoch.
pub fn sample_stream(epoch: usize, sample_index: usize) -> u64 {
    ((epoch as u64) << 32) | sample_index as u64
}

/// Deterministic keyed random stream.
///
/// Identical `(seed, stream_key)` and draw sequence give identical outputs
/// on any platform.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    stream_key: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64, stream_key: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_key);
        Self {
            seed,
            stream_key,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_key(&self) -> u64 {
        self.stream_key
    }

    /// A fresh stream with the same seed and a different key. The new
    /// stream starts at its beginning regardless of how much this one
    /// has been consumed.
    pub fn substream(&self, stream_key: u64) -> Self {
        Self::new(self.seed, stream_key)
    }

    /// One standard-normal draw.
    pub fn next_gaussian(&mut self) -> f32 {
        self.rng.sample(StandardNormal)
    }

    /// One uniform draw in `[0, 1)`.
    pub fn next_uniform(&mut self) -> f32 {
        self.rng.random::<f32>()
    }

    /// One uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Uniform index in `[0, n)`.
    pub fn next_index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.rng.random_range(0..=i);
            slice.swap(i, j);
        }
    }
}

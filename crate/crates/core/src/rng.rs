//! Seeded, stream-separated randomness.
//!
//! Every consumer (initialization, masking, noise sampling, batching, ...)
//! draws from its own ChaCha stream so that reordering one consumer never
//! shifts the draws seen by another.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Well-known stream identifiers.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const MASK: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const ITM_NEGATIVES: u64 = 5;
    pub const CORPUS: u64 = 6;
    pub const HSD: u64 = 7;
    pub const VIZ: u64 = 8;
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// A stream for the `index`-th use of consumer `stream_id`, e.g. one per
    /// training step or per generated example.
    pub fn derived(seed: u64, stream_id: u64, index: u64) -> Self {
        Self::new(seed, (stream_id << 40) ^ index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Standard normal truncated to `[-bound, bound]` by rejection.
    pub fn truncated_normal(&mut self, bound: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= bound {
                return z;
            }
        }
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

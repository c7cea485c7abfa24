//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`) seeded
//! from a 64-bit value with `SeedableRng::seed_from_u64`. ChaCha output is
//! defined by the algorithm, so a seed yields the same stream on every
//! platform.
//!
//! Forking never consumes state from the parent. A child's seed is
//!
//! ```text
//! child = splitmix64(parent ^ fnv1a64(label))
//! child_indexed = splitmix64(child ^ splitmix64(index))
//! ```
//!
//! where `fnv1a64` is the 64-bit FNV-1a hash of the UTF-8 label and
//! `splitmix64` is the SplitMix64 finaliser. Streams keyed by
//! `(seed, label, index)` can therefore be recreated in any order, which is
//! what makes per-round data independent of the run schedule.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream named by `label`.
    pub fn fork(&self, label: &str) -> Rng {
        Rng::new(splitmix64(self.seed ^ fnv1a64(label.as_bytes())))
    }

    /// Independent child stream named by `(label, index)`, e.g. one per round.
    pub fn fork_indexed(&self, label: &str, index: u64) -> Rng {
        let base = splitmix64(self.seed ^ fnv1a64(label.as_bytes()));
        Rng::new(splitmix64(base ^ splitmix64(index)))
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

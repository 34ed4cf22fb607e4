//! Seeded, splittable randomness.
//!
//! Every consumer (data generation, noise injection, initialization, ε draws,
//! shuffling) takes its own labeled child stream. A child is a function of the
//! parent *seed* and the label only, so drawing from the parent never shifts
//! what a child produces.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A ChaCha8 stream plus the seed it was created from.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            stream: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream from this state's seed and `label`.
    pub fn split(&self, label: &str) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes()))))
    }

    /// Child stream keyed by a label and an index (e.g. one per iteration).
    pub fn split_indexed(&self, label: &str, index: u64) -> RngState {
        let base = splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes())));
        RngState::new(splitmix64(base ^ splitmix64(index)))
    }

    /// `dim` i.i.d. standard normal draws.
    pub fn standard_normal(&mut self, dim: usize) -> Vec<f64> {
        (0..dim)
            .map(|_| self.stream.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.stream.random::<f64>()
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.stream.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.stream);
    }

    /// `k` distinct indices from `0..len`, in draw order.
    pub fn sample_without_replacement(&mut self, len: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.stream, len, k.min(len)).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = RngState::new(7).standard_normal(16);
        let b = RngState::new(7).standard_normal(16);
        assert_eq!(a, b);
    }

    #[test]
    fn split_streams_differ() {
        let root = RngState::new(11);
        let a = root.split("a").standard_normal(8);
        let b = root.split("b").standard_normal(8);
        assert_ne!(a, b);
    }

    #[test]
    fn split_ignores_parent_consumption() {
        let mut root = RngState::new(3);
        let before = root.split("child").standard_normal(4);
        root.standard_normal(100);
        let after = root.split("child").standard_normal(4);
        assert_eq!(before, after);
    }

    #[test]
    fn normal_moments() {
        let draws = RngState::new(2024).standard_normal(100_000);
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn indexed_children_are_distinct() {
        let root = RngState::new(5);
        let a = root.split_indexed("eps", 0).standard_normal(4);
        let b = root.split_indexed("eps", 1).standard_normal(4);
        assert_ne!(a, b);
    }
}

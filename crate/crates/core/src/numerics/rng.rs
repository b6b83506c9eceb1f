//! Seeded, splittable random streams.
//!
//! Each [`Rng`] wraps a ChaCha8 keystream (a counter-based generator). Child
//! streams are derived from the parent's *seed* and a label, never from the
//! parent's position, so `split("init")` returns the same stream no matter how
//! many values were drawn from the parent beforehand.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by `label`.
    pub fn split(&self, label: &str) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(fnv1a(label))))
    }

    /// Independent child stream keyed by `label` and an index (e.g. a step).
    pub fn split_index(&self, label: &str, index: u64) -> Rng {
        Rng::new(splitmix64(
            self.seed ^ splitmix64(fnv1a(label) ^ splitmix64(index.wrapping_add(1))),
        ))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n` in random order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k.min(n));
        idx
    }

    pub fn normal_tensor<S: Float>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64_lossy(self.normal() * std))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches generated length")
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_ignores_parent_consumption() {
        let parent = Rng::new(11);
        let mut drained = parent.clone();
        for _ in 0..57 {
            drained.next_u64();
        }
        let mut c1 = parent.split("init");
        let mut c2 = drained.split("init");
        assert_eq!(c1.next_u64(), c2.next_u64());
        let mut other = parent.split("data");
        assert_ne!(parent.split("init").next_u64(), other.next_u64());
    }

    #[test]
    fn split_index_distinct() {
        let r = Rng::new(3);
        let a = r.split_index("step", 0).next_u64();
        let b = r.split_index("step", 1).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn frozen_first_draws() {
        // Platform-independence canary: these values must never change.
        let mut r = Rng::new(0);
        let first = r.next_u64();
        let mut again = Rng::new(0);
        assert_eq!(first, again.next_u64());
        assert_eq!(first, 13080132717333068652);
        assert_eq!(Rng::new(42).normal().to_bits(), 4602282164425616919);
    }

    #[test]
    fn choose_distinct_is_distinct() {
        let mut r = Rng::new(5);
        let mut v = r.choose_distinct(50, 20);
        v.sort_unstable();
        v.dedup();
        assert_eq!(v.len(), 20);
    }
}

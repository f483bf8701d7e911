//! Counter-based random streams.
//!
//! Output `i` of a stream is `mix(key + (i + 1) * GOLDEN)` where `key` is a
//! scrambled seed. Because the state is just `(seed, counter)`, a stream can
//! be checkpointed, resumed, or split into independent children without any
//! platform-dependent state.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    #[inline]
    fn key(&self) -> u64 {
        mix64(self.seed ^ 0x6A09_E667_F3BC_C909)
    }

    /// Independent child stream; advances this stream by one draw.
    pub fn split(&mut self) -> RngState {
        let a = self.next_u64();
        RngState::new(mix64(a ^ GOLDEN.rotate_left(17)))
    }

    /// Child stream keyed by `label` without advancing this stream.
    pub fn derive(&self, label: u64) -> RngState {
        RngState::new(mix64(self.key() ^ mix64(label.wrapping_add(GOLDEN))) ^ self.counter)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// `k` distinct indices from `0..n`, uniformly, in draw order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct items from {n}");
        // Partial Fisher-Yates.
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        self.sample_distinct(n, n)
    }

    /// Index drawn according to non-negative `weights` (need not sum to 1).
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }
}

impl RngCore for RngState {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key().wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    /// Standard normal entries.
    pub fn randn(rng: &mut RngState, shape: impl Into<Vec<usize>>) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.normal()))
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform(rng: &mut RngState, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Self {
        Self::from_fn(shape, |_| T::from_f64(lo + (hi - lo) * rng.uniform()))
    }
}

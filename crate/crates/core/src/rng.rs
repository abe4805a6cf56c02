//! Seeded, splittable random streams.
//!
//! Every stochastic operation in the crate takes an explicit [`RngStream`].
//! Streams are ChaCha8 generators keyed by `(seed, stream id)`; child streams
//! are derived from a parent by drawing a fresh key, so a run is fully
//! determined by its root seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` under the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Derive a child stream. Advances `self` by one 64-bit draw.
    pub fn split(&mut self) -> Self {
        let key = self.inner.next_u64();
        let stream = self.inner.next_u64();
        Self::with_stream(key, stream)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`. `n` must be nonzero.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's nearly-divisionless method, with rejection for exactness.
        let range = n as u64;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (range as u128);
            let low = m as u64;
            if low >= range || low >= range.wrapping_neg() % range {
                return (m >> 64) as usize;
            }
        }
    }
}

impl RngCore for RngStream {
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
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(7);
        let mut b = RngStream::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_children_differ_from_parent_and_each_other() {
        let mut root = RngStream::new(1);
        let mut c1 = root.split();
        let mut c2 = root.split();
        let x1: Vec<u64> = (0..8).map(|_| c1.next_u64()).collect();
        let x2: Vec<u64> = (0..8).map(|_| c2.next_u64()).collect();
        assert_ne!(x1, x2);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = RngStream::new(3);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn index_covers_range() {
        let mut r = RngStream::new(5);
        let mut seen = [0usize; 5];
        for _ in 0..5000 {
            seen[r.index(5)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800));
    }
}

//! Reproducible random streams.
//!
//! A stream is identified by `(seed, stream_id)`; together with the number of
//! words consumed so far they determine every future draw. Streams with
//! different ids are independent ChaCha sequences under the same key, so
//! Monte Carlo replicas can be assigned one stream each and evaluated on any
//! number of worker threads without changing the results.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Source of uniform and Gaussian variates.
pub trait Uniforms {
    /// Uniform draw on the open interval (0, 1).
    fn uniform(&mut self) -> f64;
    /// Standard normal draw.
    fn normal(&mut self) -> f64;
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Child stream for nested replicas, e.g. one per path inside one
    /// experiment, derived without consuming words from `self`.
    pub fn substream(&self, index: u64) -> RngStream {
        let mixed = splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        RngStream::new(self.seed ^ splitmix64(index), mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

impl Uniforms for RngStream {
    #[inline]
    fn uniform(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_streams_agree() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert_eq!(a.counter(), b.counter());
    }

    #[test]
    fn distinct_ids_differ() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 4);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn uniforms_are_open() {
        let mut s = RngStream::new(1, 1);
        let mut sum = 0.0;
        for _ in 0..100_000 {
            let u = s.uniform();
            assert!(u > 0.0 && u < 1.0);
            sum += u;
        }
        assert!((sum / 100_000.0 - 0.5).abs() < 4.0 * (1.0f64 / 12.0 / 100_000.0).sqrt());
    }
}

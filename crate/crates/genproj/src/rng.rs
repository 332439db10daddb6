//! Deterministic, splittable random streams.
//!
//! Every random draw in the library flows through a [`SeedRng`]. Substreams
//! are keyed by a 64-bit id mixed into the parent's stream id, so candidate
//! i's draws never depend on how many values candidate j consumed, and
//! substreams of substreams stay distinct.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone)]
pub struct SeedRng {
    seed: u64,
    stream: u64,
    inner: ChaCha12Rng,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0, inner: ChaCha12Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream: same seed, child ChaCha stream id derived from
    /// the parent's stream and `id`. Streams do not interact, whatever
    /// order or amount they are consumed in.
    pub fn substream(&self, id: u64) -> Self {
        let stream = splitmix64(self.stream ^ splitmix64(id));
        let mut inner = ChaCha12Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self { seed: self.seed, stream, inner }
    }

    /// One standard-normal draw.
    pub fn normal(&mut self) -> f64 {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut self.inner)
    }

    /// Vector of standard-normal draws.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        rand::Rng::random_range(&mut self.inner, lo..hi)
    }
}

impl RngCore for SeedRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

/// Stream-id layout used by the projection pipeline: one byte of phase tag,
/// generation counter, candidate slot.
pub fn stream_id(phase: u8, generation: u32, slot: u32) -> u64 {
    ((phase as u64) << 56) | ((generation as u64) << 24) | slot as u64
}

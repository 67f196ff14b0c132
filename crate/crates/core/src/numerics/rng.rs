//! Seeded, counter-based random number generation.
//!
//! The generator is ChaCha8 keyed by a 64-bit seed. Sub-streams derived from
//! `(seed, stream_id)` use ChaCha's stream counter, so streams with the same
//! seed and different ids never overlap. Normal draws use Box-Muller on top
//! of the uniform stream, with `libm` for the transcendentals so the exact
//! draw sequence is reproducible across platforms.

use std::f64::consts::PI;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Mat;

/// A single owner stream of randomness. Concurrent drawing from one stream is
/// forbidden; parallel code derives one sub-stream per worker instead.
#[derive(Clone, Debug)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    /// Stream 0 for the given seed.
    pub fn from_seed(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    /// Independent sub-stream `stream_id` of the given seed.
    pub fn substream(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { inner }
    }

    /// Uniform draw in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform draw in (0, 1]; safe under `ln`.
    #[inline]
    fn uniform_open(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 1.0) * (1.0 / 9007199254740992.0)
    }

    /// `n` i.i.d. standard-normal draws via Box-Muller. Pairs are generated
    /// together and the spare is dropped for odd `n`, so the stream advances
    /// by `2 * ceil(n / 2)` uniforms.
    pub fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let u1 = self.uniform_open();
            let u2 = self.uniform_open();
            let r = libm::sqrt(-2.0 * libm::log(u1));
            let theta = 2.0 * PI * u2;
            out.push(r * libm::cos(theta));
            if out.len() < n {
                out.push(r * libm::sin(theta));
            }
        }
        out
    }

    pub fn standard_normal_mat(&mut self, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(rows, cols, self.standard_normal(rows * cols))
            .expect("length matches by construction")
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng;
        self.inner.random_range(0..n)
    }
}

impl RngCore for RngStream {
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

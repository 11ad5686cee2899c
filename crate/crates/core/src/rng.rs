//! Seeded random streams.
//!
//! Every stream is a ChaCha20 keystream addressed by `(seed, stream)`, so
//! draws are platform-independent and independent streams never overlap.
//! Gaussians come from a hand-rolled Box–Muller transform rather than a
//! distribution crate so the mapping from bits to floats is pinned here.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Stream ids used by the library. Keeping them in one place avoids two
/// consumers silently sharing a keystream.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const PRM_INIT: u64 = 4;
    pub const PRM_TEACHER: u64 = 5;
    pub const MONTE_CARLO: u64 = 6;
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Independent keystream `stream` under `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on (0, 1]; safe to take the log of.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller. The second variate of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    /// +1 or -1 with equal probability.
    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform direction on the unit sphere in `d` dimensions.
    pub fn unit_sphere(&mut self, d: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| self.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

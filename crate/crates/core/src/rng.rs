//! Counter-addressed Gaussian streams.
//!
//! Each stream is a ChaCha8 keystream selected by `(seed, stream)`; draw `k`
//! of a stream is a fixed function of `(seed, stream, k)`, so a path's
//! increments are the same whichever thread generates them.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named sub-experiment of `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag))
}

/// Standard normal draws (Box–Muller over a ChaCha8 stream).
#[derive(Clone, Debug)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NormalStream { rng, spare: None }
    }

    /// Stream positioned so that the next call to [`next`](Self::next)
    /// returns draw number `counter`.
    pub fn at(seed: u64, stream: u64, counter: u64) -> Self {
        let mut s = Self::new(seed, stream);
        // one Box–Muller pair consumes two u64 = four 32-bit words
        s.rng.set_word_pos(u128::from(counter / 2) * 4);
        if counter % 2 == 1 {
            s.next();
        }
        s
    }

    /// Uniform on (0, 1].
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for o in out {
            *o = self.next();
        }
    }
}

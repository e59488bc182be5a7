//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`SimRng`], a ChaCha8 stream
//! keyed by a 64-bit seed. ChaCha8 output is specified bit-for-bit, so a seed
//! produces the same plant and weights on every platform. Uniform reals are
//! built from the top 53 bits of one `u64` draw.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SimRng {
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform draw on `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on the half-open interval `[low, high)`.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        debug_assert!(low < high);
        let v = low + (high - low) * self.unit();
        // rounding can land exactly on `high` for wide intervals
        if v < high {
            v
        } else {
            low
        }
    }

    pub fn uniform_vec(&mut self, len: usize, low: f64, high: f64) -> Vec<f64> {
        (0..len).map(|_| self.uniform(low, high)).collect()
    }
}

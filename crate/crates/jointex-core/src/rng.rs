//! Seeded randomness: one ChaCha stream per purpose.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a tag.
pub fn derived(seed: u64, tag: u64) -> SeededRng {
    let mixed = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Inverted dropout source. `rate == 0` yields no mask.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut SeededRng,
}

impl<'a> Dropout<'a> {
    pub fn new(rate: f64, rng: &'a mut SeededRng) -> Self {
        Dropout { rate, rng }
    }

    /// Scaled keep mask of length `n`, or `None` when dropout is off.
    pub fn mask(&mut self, n: usize) -> Option<Vec<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        Some(
            (0..n)
                .map(|_| {
                    if self.rng.gen::<f64>() < self.rate {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect(),
        )
    }
}

pub fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

//! Deterministic pseudo-random numbers for the simulator and fixtures.
//!
//! Streams come from xoshiro256** seeded through splitmix64 (the
//! `rand_xoshiro` implementations). Derived quantities are pinned here so
//! other implementations can reproduce them exactly:
//!
//! * `next_f64`: the upper 53 bits of `next_u64` scaled by 2^-53, in [0, 1);
//! * `standard_normal`: Box-Muller cosine branch,
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`, consuming two uniforms per sample.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256StarStar};

/// Combines two seeds into one stream seed.
pub fn mix_seeds(a: u64, b: u64) -> u64 {
    SplitMix64::seed_from_u64(a ^ b.rotate_left(32) ^ 0xD1B5_4A32_D192_ED03).next_u64()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Xoshiro256(Xoshiro256StarStar);

impl Xoshiro256 {
    /// State words are four consecutive splitmix64 outputs from `seed`.
    pub fn seed_from_u64(seed: u64) -> Self {
        Self(Xoshiro256StarStar::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.standard_normal()).collect()
    }

    /// Uniform integer in `0..bound`. `bound` must be nonzero.
    pub fn below(&mut self, bound: usize) -> usize {
        (self.next_f64() * bound as f64) as usize % bound
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

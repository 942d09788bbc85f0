//! Seeded randomness.
//!
//! The generator is xoshiro256** seeded through SplitMix64 (the
//! `rand_xoshiro` `seed_from_u64` path). Derived quantities are fixed so any
//! implementation can reproduce the same streams:
//!
//! * uniform `[0, 1)`: top 53 bits of `next_u64`, times `2^-53`;
//! * Gaussian: Box-Muller cosine branch, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`,
//!   two uniforms per sample, the sine branch is discarded;
//! * integer below `n`: `(next_u64 * n) >> 64` in 128-bit arithmetic;
//! * shuffle: Fisher-Yates from the last index down, `j = below(i + 1)`;
//! * named streams: `splitmix64(root ^ fnv1a64(label))`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::numerics::Matrix;

pub struct SeededRng(Xoshiro256StarStar);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256StarStar::seed_from_u64(seed))
    }

    /// Generator for the named stream under `root`.
    pub fn stream(root: u64, label: &str) -> Self {
        Self::new(derive_seed(root, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Matrix with i.i.d. `N(0, std^2)` entries, filled row-major.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| std * self.gaussian()).collect();
        Matrix::new(rows, cols, data).expect("gaussian samples are finite")
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a64(label.as_bytes()))
}

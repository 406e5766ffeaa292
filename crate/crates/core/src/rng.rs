//! Seeded randomness. Every random draw in the crate goes through a
//! `ChaCha8Rng` built from an explicit `u64` seed so runs are reproducible
//! across platforms.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::grid::{Dims, Grid};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard circular complex Gaussian: `E|z|² = 1`.
pub fn complex_normal(rng: &mut Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Grid of i.i.d. standard complex Gaussians.
pub fn seeded_grid(dims: Dims, seed: u64) -> Grid {
    let mut r = rng(seed);
    let data = (0..dims.len()).map(|_| complex_normal(&mut r)).collect();
    Grid::from_raw(dims, data)
}

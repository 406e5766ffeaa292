//! Centered, orthonormal 2-D DFT applied independently to every channel.
//!
//! `forward = fftshift ∘ DFT ∘ ifftshift / √(N1·N2)` so the DC sample sits at
//! index `(N1/2, N2/2)` and the transform is unitary: `inverse` is both the
//! inverse and the adjoint of `forward`.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, dir: Direction) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        match dir {
            Direction::Forward => p.plan_fft_forward(len),
            Direction::Inverse => p.plan_fft_inverse(len),
        }
    })
}

/// Centered orthonormal transform of every channel of `x`.
pub fn fft_centered(x: &Grid, dir: Direction) -> Grid {
    let mut out = x.clone();
    transform_in_place(&mut out, dir);
    out
}

pub fn forward(x: &Grid) -> Grid {
    fft_centered(x, Direction::Forward)
}

pub fn inverse(x: &Grid) -> Grid {
    fft_centered(x, Direction::Inverse)
}

pub fn transform_in_place(x: &mut Grid, dir: Direction) {
    let d = x.dims();
    let (n1, n2, nc) = (d.rows, d.cols, d.channels);
    let data = x.as_mut_slice();

    // rows axis (length n1) for each column/channel, then cols axis
    if n1 > 1 {
        let fft = plan(n1, dir);
        let mut buf = vec![Complex64::new(0.0, 0.0); n1];
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for col in 0..n2 {
            for ch in 0..nc {
                let at = |r: usize| (r * n2 + col) * nc + ch;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = data[at((i + n1 / 2) % n1)];
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                for (i, b) in buf.iter().enumerate() {
                    data[at((i + n1 / 2) % n1)] = *b;
                }
            }
        }
    }
    if n2 > 1 {
        let fft = plan(n2, dir);
        let mut buf = vec![Complex64::new(0.0, 0.0); n2];
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for row in 0..n1 {
            for ch in 0..nc {
                let at = |c: usize| (row * n2 + c) * nc + ch;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = data[at((i + n2 / 2) % n2)];
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                for (i, b) in buf.iter().enumerate() {
                    data[at((i + n2 / 2) % n2)] = *b;
                }
            }
        }
    }
    let scale = 1.0 / ((n1 * n2) as f64).sqrt();
    data.iter_mut().for_each(|z| *z *= scale);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;
    use crate::rng::seeded_grid;

    // Direct O(N²) centered DFT used as an oracle.
    fn naive_forward(x: &Grid) -> Grid {
        let d = x.dims();
        let (n1, n2) = (d.rows as isize, d.cols as isize);
        let (h1, h2) = (n1 / 2, n2 / 2);
        Grid::from_fn(d, |k1, k2, ch| {
            let mut acc = Complex64::new(0.0, 0.0);
            for r in 0..d.rows {
                for c in 0..d.cols {
                    let (a, b) = ((r as isize - h1) as f64, (c as isize - h2) as f64);
                    let (u, v) = ((k1 as isize - h1) as f64, (k2 as isize - h2) as f64);
                    let ph = -2.0 * std::f64::consts::PI * (a * u / n1 as f64 + b * v / n2 as f64);
                    acc += x.get(r, c, ch) * Complex64::from_polar(1.0, ph);
                }
            }
            acc / ((n1 * n2) as f64).sqrt()
        })
        .unwrap()
    }

    #[test]
    fn two_point_transform_centers_dc() {
        let d = Dims::new(1, 2, 1).unwrap();
        let x = Grid::from_vec(d, vec![Complex64::new(1.0, 0.0); 2]).unwrap();
        let y = forward(&x);
        assert!(y.get(0, 0, 0).norm() < 1e-15);
        assert!((y.get(0, 1, 0) - Complex64::new(2f64.sqrt(), 0.0)).norm() < 1e-15);
    }

    #[test]
    fn matches_direct_dft_for_odd_and_even_sizes() {
        for (n1, n2, nc) in [(5, 4, 2), (3, 7, 1), (6, 6, 3), (1, 9, 1)] {
            let x = seeded_grid(Dims::new(n1, n2, nc).unwrap(), 11);
            let fast = forward(&x);
            let slow = naive_forward(&x);
            assert!(fast.distance(&slow) <= 1e-12 * slow.norm(), "{n1}x{n2}x{nc}");
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let x = seeded_grid(Dims::new(17, 8, 3).unwrap(), 3);
        let k = forward(&x);
        assert!(((k.norm() - x.norm()) / x.norm()).abs() <= 1e-12);
        let back = inverse(&k);
        assert!(back.distance(&x) <= 1e-12 * x.norm());
    }
}

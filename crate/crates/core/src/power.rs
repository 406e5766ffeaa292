//! Power iteration for the largest eigenvalue of a symmetric positive
//! semidefinite operator given only as a matrix-free closure.

use crate::error::{Error, Result};
use crate::rng;

/// Seed of the deterministic start vector.
pub const POWER_SEED: u64 = 0x5_eed0_f1a7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerEstimate {
    pub lambda: f64,
    pub iters: usize,
}

/// Estimates `λ_max(A)` for PSD `A: R^n → R^n`.
///
/// Stops when the Rayleigh quotient changes by at most `tol` relative.
/// Returns `lambda = 0` immediately if `A` maps the start vector to zero.
pub fn largest_eigenvalue(
    n: usize,
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<PowerEstimate> {
    let mut r = rng::rng(POWER_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| rng::normal(&mut r)).collect();
    normalize(&mut v);
    let mut prev = f64::NAN;
    let mut last_change = f64::INFINITY;
    for it in 1..=max_iters {
        let w = apply(&v);
        let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let wn = norm(&w);
        if wn == 0.0 {
            return Ok(PowerEstimate { lambda: 0.0, iters: it });
        }
        if prev.is_finite() {
            last_change = (lambda - prev).abs() / lambda.abs().max(f64::MIN_POSITIVE);
            if last_change <= tol {
                return Ok(PowerEstimate { lambda, iters: it });
            }
        }
        prev = lambda;
        v = w;
        v.iter_mut().for_each(|x| *x /= wn);
    }
    Err(Error::PowerIteration { iters: max_iters, last_change })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

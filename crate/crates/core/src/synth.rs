//! Synthetic data with known structured low-rank structure, Cartesian
//! sampling masks, noise and a numerical-rank oracle.
//!
//! Sums of `r` integer grid harmonics give wrap-around Hankel matrices of
//! rank exactly `r` once the window is large enough, so they are exactly
//! annihilated by a null-space filter bank.

use std::collections::HashSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::index::{sample, sample_weighted};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid};
use crate::hankel::{hankel_lift, Window};
use crate::mask::{MaskRole, Rect, SamplingMask};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicSpec {
    pub dims: Dims,
    /// Integer frequency pairs `(k1, k2)`; reduced modulo the grid size.
    pub modes: Vec<(i64, i64)>,
    /// Amplitudes `[mode][coil]`; seeded complex Gaussians when `None`.
    pub amplitudes: Option<Vec<Complex64>>,
    pub seed: u64,
}

impl HarmonicSpec {
    pub fn new(dims: Dims, modes: Vec<(i64, i64)>, seed: u64) -> Self {
        Self { dims, modes, amplitudes: None, seed }
    }

    fn reduced(&self, k: (i64, i64)) -> (i64, i64) {
        (k.0.rem_euclid(self.dims.rows as i64), k.1.rem_euclid(self.dims.cols as i64))
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for &k in &self.modes {
            if !seen.insert(self.reduced(k)) {
                return Err(Error::DuplicateMode(k.0, k.1));
            }
        }
        if let Some(a) = &self.amplitudes {
            if a.len() != self.modes.len() * self.dims.channels {
                return Err(Error::DimMismatch(format!(
                    "{} amplitudes for {} modes x {} coils",
                    a.len(),
                    self.modes.len(),
                    self.dims.channels
                )));
            }
        }
        Ok(())
    }
}

/// `x[n, c] = Σ_j a_{j,c} · exp(2πi⟨k_j, n⟩/N)`.
pub fn gen_harmonics(spec: &HarmonicSpec) -> Result<Grid> {
    spec.validate()?;
    let d = spec.dims;
    let amps = match &spec.amplitudes {
        Some(a) => a.clone(),
        None => {
            let mut g = rng::rng(spec.seed);
            (0..spec.modes.len() * d.channels).map(|_| rng::complex_normal(&mut g)).collect()
        }
    };
    let modes: Vec<(i64, i64)> = spec.modes.iter().map(|&k| spec.reduced(k)).collect();
    Grid::from_fn(d, |n1, n2, c| {
        modes
            .iter()
            .enumerate()
            .map(|(j, &(k1, k2))| {
                // exact integer phase keeps the harmonic periodic to round-off
                let t1 = (k1 as usize * n1) % d.rows;
                let t2 = (k2 as usize * n2) % d.cols;
                let phase = 2.0 * PI * (t1 as f64 / d.rows as f64 + t2 as f64 / d.cols as f64);
                amps[j * d.channels + c] * Complex64::from_polar(1.0, phase)
            })
            .sum()
    })
}

/// `r` distinct seeded modes on a `dims` grid.
pub fn random_modes(dims: Dims, r: usize, seed: u64) -> Result<Vec<(i64, i64)>> {
    let total = dims.pixels();
    if r > total {
        return Err(Error::InvalidConfig(format!("{r} modes on a grid with {total} frequencies")));
    }
    let mut g = rng::rng(seed);
    Ok(sample(&mut g, total, r)
        .into_iter()
        .map(|i| ((i / dims.cols) as i64, (i % dims.cols) as i64))
        .collect())
}

/// `count` signals sharing `modes` (hence their annihilating filters) with
/// independent seeded amplitudes.
pub fn gen_ensemble(dims: Dims, modes: &[(i64, i64)], count: usize, seed: u64) -> Result<Vec<Grid>> {
    (0..count as u64)
        .map(|i| gen_harmonics(&HarmonicSpec::new(dims, modes.to_vec(), seed.wrapping_mul(1_000_003).wrapping_add(i))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Whole rows (phase-encoding lines) chosen at random.
    Random1d,
    /// Whole rows on a stride-`R` lattice.
    Regular1d,
    Random2d,
    Regular2d,
}

impl MaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1d-random" => Some(MaskKind::Random1d),
            "1d-regular" => Some(MaskKind::Regular1d),
            "2d-random" => Some(MaskKind::Random2d),
            "2d-regular" => Some(MaskKind::Regular2d),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Random1d => "1d-random",
            MaskKind::Regular1d => "1d-regular",
            MaskKind::Random2d => "2d-random",
            MaskKind::Regular2d => "2d-regular",
        }
    }

    fn is_1d(self) -> bool {
        matches!(self, MaskKind::Random1d | MaskKind::Regular1d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub accel: f64,
    /// Calibration rows; for 1-D kinds whole lines, so `acs_cols` is ignored.
    pub acs_rows: usize,
    pub acs_cols: usize,
    pub seed: u64,
    /// Exponent `p` of the sampling density `(1 − ρ)^p`, with `ρ` the
    /// normalized distance from the centre. 0 samples uniformly.
    pub density_exponent: f64,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, accel: f64, acs_rows: usize, acs_cols: usize, seed: u64) -> Self {
        Self { kind, accel, acs_rows, acs_cols, seed, density_exponent: 0.0 }
    }
}

/// Generates a sampling mask with a centred, fully sampled calibration
/// region and `round(N/R)` sampled lines (1-D) or points (2-D) in total.
///
/// Regular kinds take the stride-`R` lattice outside the calibration
/// region, thinned evenly when the region already uses part of the budget.
pub fn gen_mask(spec: &MaskSpec, rows: usize, cols: usize) -> Result<SamplingMask> {
    if !(spec.accel >= 1.0) || !spec.accel.is_finite() {
        return Err(Error::InvalidConfig(format!("acceleration {} < 1", spec.accel)));
    }
    if !(spec.density_exponent >= 0.0) {
        return Err(Error::InvalidConfig(format!("density exponent {}", spec.density_exponent)));
    }
    let one_d = spec.kind.is_1d();
    let (units, unit_cols) = if one_d { (rows, 1) } else { (rows * cols, cols) };
    let acs = match (spec.acs_rows, one_d) {
        (0, _) => None,
        (r, true) => Some(Rect::centered(rows, cols, r, cols)?),
        (r, false) => Some(Rect::centered(rows, cols, r, spec.acs_cols.max(1))?),
    };
    let in_acs = |u: usize| {
        acs.is_some_and(|a| if one_d { a.contains(u, a.col0) } else { a.contains(u / unit_cols, u % unit_cols) })
    };
    let acs_units = (0..units).filter(|&u| in_acs(u)).count();
    let total = ((units as f64 / spec.accel).round() as usize).max(1);
    if acs_units > total {
        return Err(Error::BudgetExceeded(format!(
            "calibration region uses {acs_units} of {total} sampled {} at R = {}",
            if one_d { "lines" } else { "points" },
            spec.accel
        )));
    }
    let budget = total - acs_units;
    let free: Vec<usize> = (0..units).filter(|&u| !in_acs(u)).collect();
    let mut g = rng::rng(spec.seed);

    let chosen: Vec<usize> = match spec.kind {
        MaskKind::Random1d | MaskKind::Random2d => draw(&mut g, &free, budget, spec, rows, cols, one_d)?,
        MaskKind::Regular1d | MaskKind::Regular2d => {
            let lattice: Vec<usize> = if one_d {
                let stride = spec.accel.round().max(1.0) as usize;
                free.iter().copied().filter(|u| u % stride == 0).collect()
            } else {
                let (sy, sx) = lattice_strides(spec.accel);
                free.iter().copied().filter(|u| (u / cols).is_multiple_of(sy) && (u % cols).is_multiple_of(sx)).collect()
            };
            let mut picked = thin_evenly(&lattice, budget);
            if picked.len() < budget {
                let taken: HashSet<usize> = picked.iter().copied().collect();
                let rest: Vec<usize> = free.iter().copied().filter(|u| !taken.contains(u)).collect();
                picked.extend(draw(&mut g, &rest, budget - picked.len(), spec, rows, cols, one_d)?);
            }
            picked
        }
    };

    let mut keep = vec![false; rows * cols];
    let mut mark = |u: usize| {
        if one_d {
            keep[u * cols..(u + 1) * cols].iter_mut().for_each(|k| *k = true);
        } else {
            keep[u] = true;
        }
    };
    (0..units).filter(|&u| in_acs(u)).for_each(&mut mark);
    chosen.into_iter().for_each(&mut mark);
    SamplingMask::new(rows, cols, keep, acs, spec.accel, MaskRole::Omega)
}

/// Strides `(sy, sx)` with `sy·sx = round(R)` and `sy ≤ sx` as close as possible.
fn lattice_strides(accel: f64) -> (usize, usize) {
    let r = accel.round().max(1.0) as usize;
    let mut sy = (r as f64).sqrt().floor() as usize;
    while sy > 1 && !r.is_multiple_of(sy) {
        sy -= 1;
    }
    (sy.max(1), r / sy.max(1))
}

fn thin_evenly(items: &[usize], k: usize) -> Vec<usize> {
    if items.len() <= k {
        return items.to_vec();
    }
    (0..k).map(|i| items[(2 * i + 1) * items.len() / (2 * k)]).collect()
}

fn draw(
    g: &mut Rng,
    from: &[usize],
    k: usize,
    spec: &MaskSpec,
    rows: usize,
    cols: usize,
    one_d: bool,
) -> Result<Vec<usize>> {
    if k > from.len() {
        return Err(Error::BudgetExceeded(format!("{k} samples requested from {} candidates", from.len())));
    }
    if spec.density_exponent == 0.0 {
        return Ok(sample(g, from.len(), k).into_iter().map(|i| from[i]).collect());
    }
    let (c1, c2) = ((rows / 2) as f64, (cols / 2) as f64);
    let radius = |u: usize| {
        if one_d {
            (u as f64 - c1).abs() / (c1 + 1.0)
        } else {
            let (y, x) = ((u / cols) as f64 - c1, (u % cols) as f64 - c2);
            ((y / (c1 + 1.0)).powi(2) + (x / (c2 + 1.0)).powi(2)).sqrt() / std::f64::consts::SQRT_2
        }
    };
    let p = spec.density_exponent;
    let idx = sample_weighted(g, from.len(), |i| (1.0 - radius(from[i])).max(1e-6).powf(p), k)
        .map_err(|e| Error::InvalidConfig(format!("density weights: {e}")))?;
    Ok(idx.into_iter().map(|i| from[i]).collect())
}

/// Numerical rank of the wrap-around Hankel lift: the number of singular
/// values above `tol · σ_max`.
pub fn hankel_rank(x: &Grid, w: Window, tol: f64) -> Result<usize> {
    let sv = hankel_lift(x, w)?.singular_values();
    let top = sv.max();
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|s| **s > tol * top).count())
}

/// Adds circular complex Gaussian noise with `E|n|² = σ²` per entry.
pub fn add_noise(x: &Grid, sigma: f64, seed: u64) -> Result<Grid> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("noise level {sigma}")));
    }
    let mut out = x.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut g = rng::rng(seed);
    out.as_mut_slice().iter_mut().for_each(|v| *v += rng::complex_normal(&mut g) * sigma);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hankel::{conv_forward, FilterBank};

    fn dims(r: usize, c: usize, n: usize) -> Dims {
        Dims::new(r, c, n).unwrap()
    }

    #[test]
    fn dc_mode_is_constant() {
        let spec = HarmonicSpec {
            dims: dims(4, 3, 1),
            modes: vec![(0, 0)],
            amplitudes: Some(vec![Complex64::new(1.0, 0.0)]),
            seed: 0,
        };
        let x = gen_harmonics(&spec).unwrap();
        assert!(x.as_slice().iter().all(|v| *v == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn first_order_recurrence_annihilates_single_mode() {
        let spec = HarmonicSpec {
            dims: dims(8, 1, 1),
            modes: vec![(1, 0)],
            amplitudes: Some(vec![Complex64::new(1.0, 0.0)]),
            seed: 0,
        };
        let x = gen_harmonics(&spec).unwrap();
        let s = FilterBank::new(
            Window::line(2).unwrap(),
            1,
            1,
            vec![Complex64::new(1.0, 0.0), -Complex64::from_polar(1.0, PI / 4.0)],
        )
        .unwrap();
        assert!(conv_forward(&x, &s).unwrap().norm() <= 1e-14);
    }

    #[test]
    fn duplicate_modes_rejected() {
        let spec = HarmonicSpec::new(dims(8, 1, 1), vec![(1, 0), (9, 0)], 0);
        assert!(matches!(gen_harmonics(&spec), Err(Error::DuplicateMode(9, 0))));
    }

    #[test]
    fn rank_oracle() {
        let x = gen_harmonics(&HarmonicSpec::new(dims(16, 1, 1), vec![(2, 0), (5, 0)], 3)).unwrap();
        assert_eq!(hankel_rank(&x, Window::line(4).unwrap(), 1e-10).unwrap(), 2);
        assert_eq!(hankel_rank(&Grid::zeros(dims(8, 1, 1)), Window::line(4).unwrap(), 1e-10).unwrap(), 0);
        let noise = rng::seeded_grid(dims(16, 1, 1), 4);
        assert_eq!(hankel_rank(&noise, Window::line(4).unwrap(), 1e-10).unwrap(), 4);
        for r in 1..=4 {
            let modes = random_modes(dims(8, 8, 2), r, r as u64).unwrap();
            let x = gen_harmonics(&HarmonicSpec::new(dims(8, 8, 2), modes, 9)).unwrap();
            assert_eq!(hankel_rank(&x, Window::new(3, 3).unwrap(), 1e-10).unwrap(), r);
        }
    }

    #[test]
    fn full_mask_at_unit_acceleration() {
        for kind in [MaskKind::Random1d, MaskKind::Regular1d, MaskKind::Random2d, MaskKind::Regular2d] {
            let m = gen_mask(&MaskSpec::new(kind, 1.0, 4, 4, 1), 16, 16).unwrap();
            assert_eq!(m.count(), 256, "{kind:?}");
        }
    }

    #[test]
    fn random_lines_count_and_acs() {
        let m = gen_mask(&MaskSpec::new(MaskKind::Random1d, 4.0, 8, 0, 5), 64, 1).unwrap();
        assert_eq!(m.count(), 16);
        assert!((28..36).all(|r| m.is_kept(r, 0)));
    }

    #[test]
    fn regular_lines_follow_stride() {
        let m = gen_mask(&MaskSpec::new(MaskKind::Regular1d, 6.0, 0, 0, 5), 64, 4).unwrap();
        let lines: Vec<usize> = (0..64).filter(|&r| m.is_kept(r, 0)).collect();
        assert_eq!(lines, (0..11).map(|i| 6 * i).collect::<Vec<_>>());
        assert!((0..64).all(|r| (0..4).all(|c| m.is_kept(r, c) == m.is_kept(r, 0))));
    }

    #[test]
    fn cardinality_within_one_line() {
        for kind in [MaskKind::Random1d, MaskKind::Regular1d, MaskKind::Random2d, MaskKind::Regular2d] {
            for seed in 0..5 {
                for accel in [2.0, 4.0, 6.0, 10.0] {
                    let spec = MaskSpec { density_exponent: if seed % 2 == 0 { 0.0 } else { 2.0 }, ..MaskSpec::new(kind, accel, 2, 4, seed) };
                    let m = gen_mask(&spec, 32, 32).unwrap();
                    let target = 1024.0 / accel;
                    assert!((m.count() as f64 - target).abs() <= 32.0, "{kind:?} R={accel}: {}", m.count());
                    let acs = m.acs().unwrap();
                    assert_eq!(acs, Rect::centered(32, 32, 2, if kind.is_1d() { 32 } else { 4 }).unwrap());
                }
            }
        }
    }

    #[test]
    fn acs_beyond_budget_is_an_error() {
        let spec = MaskSpec::new(MaskKind::Random1d, 8.0, 12, 0, 0);
        assert!(matches!(gen_mask(&spec, 64, 1), Err(Error::BudgetExceeded(_))));
    }

    #[test]
    fn masks_are_seed_deterministic() {
        let spec = MaskSpec::new(MaskKind::Random2d, 4.0, 6, 6, 11);
        assert_eq!(gen_mask(&spec, 24, 24).unwrap(), gen_mask(&spec, 24, 24).unwrap());
    }

    #[test]
    fn noise_statistics() {
        let x = rng::seeded_grid(dims(64, 64, 1), 1);
        assert!(add_noise(&x, 0.0, 3).unwrap().bitwise_eq(&x));
        let y = add_noise(&x, 0.2, 3).unwrap();
        let std = (y.sub(&x).norm_sqr() / 4096.0).sqrt();
        assert!((std - 0.2).abs() <= 0.01, "{std}");
        assert!(add_noise(&x, 0.2, 3).unwrap().bitwise_eq(&y));
    }
}

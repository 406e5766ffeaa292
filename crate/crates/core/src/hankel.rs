//! Wrap-around Hankel lifting and the null-space filter bank.
//!
//! For a window `d1 × d2` the lifted matrix `H(x, d)` has one row per
//! grid position `n = (n1, n2)` (row index `n1·N2 + n2`) and one column
//! per `(coil, a, b)` (column index `(c·d1 + a)·d2 + b`), with entry
//! `x_c[(n1 + a) mod N1, (n2 + b) mod N2]`. Coil blocks are therefore
//! concatenated column-wise.
//!
//! A [`FilterBank`] stores filters `s_j` in natural order. The operator
//! `Conv_s̄` multiplies by the time-reversed filters `s̄_j[a, b] =
//! s_j[d1-1-a, d2-1-b]`, so that channel `j` of `Conv_s̄(x)` equals
//! `H(x, d) · vec(s̄_j)`. An annihilating filter of `x` is one with
//! `H(x, d) · s̄ = 0`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid};
use crate::power::{self, PowerEstimate};

/// Hankel window size along rows and columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub d1: usize,
    pub d2: usize,
}

impl Window {
    pub fn new(d1: usize, d2: usize) -> Result<Self> {
        if d1 == 0 || d2 == 0 {
            return Err(Error::InvalidDims(format!("window must be positive, got {d1}x{d2}")));
        }
        Ok(Self { d1, d2 })
    }

    /// 1-D window of length `d` along the row axis.
    pub fn line(d: usize) -> Result<Self> {
        Self::new(d, 1)
    }

    pub fn taps(&self) -> usize {
        self.d1 * self.d2
    }

    fn check_fits(&self, dims: Dims) -> Result<()> {
        if self.d1 > dims.rows || self.d2 > dims.cols {
            return Err(Error::WindowTooLarge(format!(
                "window {}x{} exceeds grid {}x{}",
                self.d1, self.d2, dims.rows, dims.cols
            )));
        }
        Ok(())
    }
}

/// Lifts `x` to its wrap-around Hankel matrix, `(N1·N2) × (d1·d2·Nc)`.
pub fn hankel_lift(x: &Grid, w: Window) -> Result<DMatrix<Complex64>> {
    let d = x.dims();
    w.check_fits(d)?;
    let cols = w.taps() * d.channels;
    Ok(DMatrix::from_fn(d.pixels(), cols, |row, col| {
        let (n1, n2) = (row / d.cols, row % d.cols);
        let c = col / w.taps();
        let (a, b) = ((col % w.taps()) / w.d2, col % w.d2);
        x.get((n1 + a) % d.rows, (n2 + b) % d.cols, c)
    }))
}

/// Adjoint of [`hankel_lift`]: scatters every matrix entry back onto the
/// grid sample it was copied from, summing repeats.
pub fn hankel_adjoint(m: &DMatrix<Complex64>, dims: Dims, w: Window) -> Result<Grid> {
    w.check_fits(dims)?;
    if m.nrows() != dims.pixels() || m.ncols() != w.taps() * dims.channels {
        return Err(Error::DimMismatch(format!(
            "matrix {}x{} does not match lift of {dims} with window {}x{}",
            m.nrows(),
            m.ncols(),
            w.d1,
            w.d2
        )));
    }
    let mut out = Grid::zeros(dims);
    for row in 0..m.nrows() {
        let (n1, n2) = (row / dims.cols, row % dims.cols);
        for col in 0..m.ncols() {
            let c = col / w.taps();
            let (a, b) = ((col % w.taps()) / w.d2, col % w.d2);
            let i = out.index((n1 + a) % dims.rows, (n2 + b) % dims.cols, c);
            out.as_mut_slice()[i] += m[(row, col)];
        }
    }
    Ok(out)
}

/// `r` complex filters of size `d1 × d2 × Nc`.
///
/// Coefficients are stored as `[filter][coil][a][b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    window: Window,
    coils: usize,
    count: usize,
    coeffs: Vec<Complex64>,
}

impl FilterBank {
    pub fn new(window: Window, coils: usize, count: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidFilterCount("filter bank needs at least one filter".into()));
        }
        if coils == 0 {
            return Err(Error::InvalidDims("filter bank needs at least one coil".into()));
        }
        if coeffs.len() != count * coils * window.taps() {
            return Err(Error::DimMismatch(format!(
                "{} coefficients for {count} filters of {}x{}x{coils}",
                coeffs.len(),
                window.d1,
                window.d2
            )));
        }
        if coeffs.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("filter coefficient is not finite".into()));
        }
        Ok(Self { window, coils, count, coeffs })
    }

    pub fn zeros(window: Window, coils: usize, count: usize) -> Result<Self> {
        Self::new(window, coils, count, vec![Complex64::new(0.0, 0.0); count * coils * window.taps()])
    }

    /// A single filter that is `gain` at tap `(0, 0)` of `coil` and zero elsewhere.
    pub fn delta(window: Window, coils: usize, coil: usize, gain: Complex64) -> Result<Self> {
        let mut fb = Self::zeros(window, coils, 1)?;
        let i = fb.offset(0, coil, 0, 0);
        fb.coeffs[i] = gain;
        Ok(fb)
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn coils(&self) -> usize {
        self.coils
    }

    /// Number of filters `r`.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    #[inline]
    pub fn offset(&self, j: usize, c: usize, a: usize, b: usize) -> usize {
        ((j * self.coils + c) * self.window.d1 + a) * self.window.d2 + b
    }

    /// `s_j[c, a, b]`.
    pub fn get(&self, j: usize, c: usize, a: usize, b: usize) -> Complex64 {
        self.coeffs[self.offset(j, c, a, b)]
    }

    /// `s̄_j[c, a, b] = s_j[c, d1-1-a, d2-1-b]`.
    pub fn reversed(&self, j: usize, c: usize, a: usize, b: usize) -> Complex64 {
        self.get(j, c, self.window.d1 - 1 - a, self.window.d2 - 1 - b)
    }

    /// Column `j` of the matrix `s̄`, ordered like the lifted Hankel columns.
    pub fn reversed_column(&self, j: usize) -> Vec<Complex64> {
        let w = self.window;
        let mut v = Vec::with_capacity(self.coils * w.taps());
        for c in 0..self.coils {
            for a in 0..w.d1 {
                for b in 0..w.d2 {
                    v.push(self.reversed(j, c, a, b));
                }
            }
        }
        v
    }

    /// Builds a bank from reversed columns `s̄_j` (inverse of [`Self::reversed_column`]).
    pub fn from_reversed_columns(window: Window, coils: usize, cols: &[Vec<Complex64>]) -> Result<Self> {
        let mut fb = Self::zeros(window, coils, cols.len().max(1))?;
        if cols.is_empty() {
            return Err(Error::InvalidFilterCount("no filters supplied".into()));
        }
        for (j, col) in cols.iter().enumerate() {
            if col.len() != coils * window.taps() {
                return Err(Error::DimMismatch("reversed column has wrong length".into()));
            }
            for c in 0..coils {
                for a in 0..window.d1 {
                    for b in 0..window.d2 {
                        let i = fb.offset(j, c, window.d1 - 1 - a, window.d2 - 1 - b);
                        fb.coeffs[i] = col[(c * window.d1 + a) * window.d2 + b];
                    }
                }
            }
        }
        fb.validate()?;
        Ok(fb)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.coeffs.iter_mut().for_each(|z| *z *= alpha);
    }

    fn validate(&self) -> Result<()> {
        if self.coeffs.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("filter coefficient is not finite".into()));
        }
        Ok(())
    }

    /// `s̄` rearranged as `[a][b][coil][filter]` for the inner loops below.
    fn packed_reversed(&self) -> Vec<Complex64> {
        let w = self.window;
        let mut out = Vec::with_capacity(self.coeffs.len());
        for a in 0..w.d1 {
            for b in 0..w.d2 {
                for c in 0..self.coils {
                    for j in 0..self.count {
                        out.push(self.reversed(j, c, a, b));
                    }
                }
            }
        }
        out
    }

    fn check_grid(&self, dims: Dims) -> Result<()> {
        self.window.check_fits(dims)?;
        if dims.channels != self.coils {
            return Err(Error::DimMismatch(format!(
                "grid has {} coils, filter bank expects {}",
                dims.channels, self.coils
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Forward,
    Adjoint,
}

/// `Conv_s̄` (forward: `Nc`-coil grid → `r`-channel grid) or its exact
/// adjoint (`r`-channel grid → `Nc`-coil grid).
pub fn apply_filterbank(x: &Grid, s: &FilterBank, mode: Mode) -> Result<Grid> {
    match mode {
        Mode::Forward => conv_forward(x, s),
        Mode::Adjoint => conv_adjoint(x, s),
    }
}

/// Channel `j` at `n` is `Σ_{c,a,b} x_c[n + (a, b)] · s̄_j[c, a, b]`.
pub fn conv_forward(x: &Grid, s: &FilterBank) -> Result<Grid> {
    let d = x.dims();
    s.check_grid(d)?;
    let w = s.window;
    let (nc, r) = (s.coils, s.count);
    let packed = s.packed_reversed();
    let xs = x.as_slice();
    let mut out = vec![Complex64::new(0.0, 0.0); d.pixels() * r];
    for n1 in 0..d.rows {
        for n2 in 0..d.cols {
            let acc = &mut out[(n1 * d.cols + n2) * r..][..r];
            for a in 0..w.d1 {
                let row = (n1 + a) % d.rows;
                for b in 0..w.d2 {
                    let src = (row * d.cols + (n2 + b) % d.cols) * nc;
                    let taps = &packed[(a * w.d2 + b) * nc * r..][..nc * r];
                    for c in 0..nc {
                        let xv = xs[src + c];
                        for (o, k) in acc.iter_mut().zip(&taps[c * r..(c + 1) * r]) {
                            *o += xv * k;
                        }
                    }
                }
            }
        }
    }
    Ok(Grid::from_raw(d.with_channels(r), out))
}

/// Adjoint of [`conv_forward`]: `x_c[m] = Σ_{j,a,b} conj(s̄_j[c,a,b]) · u_j[m - (a, b)]`.
pub fn conv_adjoint(u: &Grid, s: &FilterBank) -> Result<Grid> {
    let d = u.dims();
    if d.channels != s.count {
        return Err(Error::DimMismatch(format!(
            "adjoint input has {} channels, filter bank has {} filters",
            d.channels, s.count
        )));
    }
    let gd = d.with_channels(s.coils);
    s.check_grid(gd)?;
    let w = s.window;
    let (nc, r) = (s.coils, s.count);
    let packed = s.packed_reversed();
    let us = u.as_slice();
    let mut out = vec![Complex64::new(0.0, 0.0); gd.len()];
    for n1 in 0..d.rows {
        for n2 in 0..d.cols {
            let uv = &us[(n1 * d.cols + n2) * r..][..r];
            for a in 0..w.d1 {
                let row = (n1 + a) % d.rows;
                for b in 0..w.d2 {
                    let dst = (row * d.cols + (n2 + b) % d.cols) * nc;
                    let taps = &packed[(a * w.d2 + b) * nc * r..][..nc * r];
                    for c in 0..nc {
                        let acc: Complex64 =
                            taps[c * r..(c + 1) * r].iter().zip(uv).map(|(k, y)| k.conj() * y).sum();
                        out[dst + c] += acc;
                    }
                }
            }
        }
    }
    Ok(Grid::from_raw(gd, out))
}

/// `Conv_s̄^H Conv_s̄ (x)`.
pub fn normal_operator(x: &Grid, s: &FilterBank) -> Result<Grid> {
    conv_adjoint(&conv_forward(x, s)?, s)
}

/// Output of [`calibrate_filters`].
#[derive(Debug, Clone)]
pub struct Calibration {
    pub filters: FilterBank,
    /// `‖Conv_s̄(acs)‖_F / ‖acs‖_F` over all returned filters.
    pub residual: f64,
    /// The same ratio per filter.
    pub filter_residuals: Vec<f64>,
    /// Indices of filters whose residual exceeds [`Calibration::FLAG_THRESHOLD`].
    pub flagged: Vec<usize>,
    /// Singular values of the calibration matrix, descending.
    pub singular_values: Vec<f64>,
    /// Rank suggested by the largest relative gap between consecutive
    /// singular values. Reported only; the caller chooses `r`.
    pub suggested_rank: usize,
}

impl Calibration {
    pub const FLAG_THRESHOLD: f64 = 1e-6;
}

/// Hankel matrix of the windows that lie entirely inside `x`
/// (no wrap-around), `(N1-d1+1)(N2-d2+1) × (d1·d2·Nc)`.
///
/// A calibration block cut out of a larger grid is not periodic, so
/// windows that wrap across its border would mix unrelated samples.
pub fn valid_hankel(x: &Grid, w: Window) -> Result<DMatrix<Complex64>> {
    let d = x.dims();
    if w.d1 > d.rows || w.d2 > d.cols {
        return Err(Error::AcsTooSmall(format!(
            "calibration block {}x{} is smaller than window {}x{}",
            d.rows, d.cols, w.d1, w.d2
        )));
    }
    let (p1, p2) = (d.rows - w.d1 + 1, d.cols - w.d2 + 1);
    Ok(DMatrix::from_fn(p1 * p2, w.taps() * d.channels, |row, col| {
        let (n1, n2) = (row / p2, row % p2);
        let c = col / w.taps();
        let (a, b) = ((col % w.taps()) / w.d2, col % w.d2);
        x.get(n1 + a, n2 + b, c)
    }))
}

/// Estimates `r` annihilating filters from a fully sampled calibration block.
///
/// The filters are the right singular vectors of the calibration Hankel
/// matrix with the smallest singular values, stored time-reversed so
/// that [`conv_forward`] annihilates the data.
pub fn calibrate_filters(acs: &Grid, w: Window, r: usize) -> Result<Calibration> {
    calibrate_stacked(&[acs], w, r)
}

/// Filters annihilating every block at once: the calibration Hankel
/// matrices of all blocks are stacked row-wise.
///
/// Signals sharing spectral support but not coil weights have different
/// joint null spaces; their common part is what this recovers.
pub fn calibrate_ensemble(blocks: &[Grid], w: Window, r: usize) -> Result<Calibration> {
    let refs: Vec<&Grid> = blocks.iter().collect();
    calibrate_stacked(&refs, w, r)
}

fn calibrate_stacked(blocks: &[&Grid], w: Window, r: usize) -> Result<Calibration> {
    let first = blocks.first().ok_or_else(|| Error::InvalidConfig("no calibration blocks".into()))?;
    let channels = first.dims().channels;
    let mut parts = Vec::with_capacity(blocks.len());
    for b in blocks {
        if b.dims().channels != channels {
            return Err(Error::DimMismatch(format!("calibration blocks have {} and {} coils", channels, b.dims().channels)));
        }
        parts.push(valid_hankel(b, w)?);
    }
    let h = if parts.len() == 1 {
        parts.pop().unwrap()
    } else {
        let rows: usize = parts.iter().map(|m| m.nrows()).sum();
        let mut h = DMatrix::zeros(rows, parts[0].ncols());
        let mut at = 0;
        for m in &parts {
            h.rows_mut(at, m.nrows()).copy_from(m);
            at += m.nrows();
        }
        h
    };
    let acs_norm = blocks.iter().map(|b| b.norm_sqr()).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let cols = h.ncols();
    if h.nrows() < cols {
        return Err(Error::AcsTooSmall(format!(
            "calibration matrix has {} rows, needs at least {cols}",
            h.nrows()
        )));
    }
    if r == 0 || r >= cols {
        return Err(Error::InvalidFilterCount(format!("r = {r} must be in 1..{cols}")));
    }
    let (sv, vt) = right_singular(&h)?;

    // null vectors v with H v ≈ 0: v = conj(row k of V^H)
    let columns: Vec<Vec<Complex64>> = (cols - r..cols)
        .rev()
        .map(|k| (0..cols).map(|i| vt[(k, i)].conj()).collect())
        .collect();
    let filters = FilterBank::from_reversed_columns(w, channels, &columns)?;

    let filter_residuals: Vec<f64> = columns
        .iter()
        .map(|v| {
            let hv = &h * DMatrix::from_column_slice(cols, 1, v);
            hv.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt() / acs_norm
        })
        .collect();
    let residual = filter_residuals.iter().map(|e| e * e).sum::<f64>().sqrt();
    let flagged = filter_residuals
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > Calibration::FLAG_THRESHOLD)
        .map(|(j, _)| j)
        .collect();
    let suggested_rank = largest_gap_rank(&sv);
    Ok(Calibration { filters, residual, filter_residuals, flagged, singular_values: sv, suggested_rank })
}

/// Singular values (descending) and matching rows of `V^H`.
pub(crate) fn right_singular(h: &DMatrix<Complex64>) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
    let svd = h.clone().svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::InvalidConfig("SVD did not produce right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let vt_sorted = DMatrix::from_fn(order.len(), vt.ncols(), |k, i| vt[(order[k], i)]);
    // thin SVD of a tall matrix returns all `cols` right vectors
    debug_assert_eq!(vt_sorted.nrows(), h.ncols().min(h.nrows()));
    Ok((sv, vt_sorted))
}

fn largest_gap_rank(sv: &[f64]) -> usize {
    // values below round-off of the largest one carry no rank information
    let floor = (sv.first().copied().unwrap_or(0.0) * f64::EPSILON * sv.len() as f64).max(f64::MIN_POSITIVE);
    let mut best = (0.0, sv.len());
    for k in 0..sv.len().saturating_sub(1) {
        let ratio = (sv[k] + floor) / (sv[k + 1] + floor);
        if ratio > best.0 {
            best = (ratio, k + 1);
        }
    }
    best.1
}

/// Margin and power-iteration settings for spectral normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecNormConfig {
    /// Target `λ_max ≤ 1 - epsilon`, `epsilon ∈ (0, 1)`.
    pub epsilon: f64,
    pub power_iters: usize,
    pub tol: f64,
}

impl Default for SpecNormConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, power_iters: 100, tol: 1e-6 }
    }
}

impl SpecNormConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!("epsilon {} not in (0, 1)", self.epsilon)));
        }
        if self.power_iters == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("power iteration needs iters > 0 and tol > 0".into()));
        }
        Ok(())
    }

    pub fn budget(&self) -> f64 {
        1.0 - self.epsilon
    }
}

/// Power-iteration estimate of `λ_max(Conv_s̄^H Conv_s̄)` on grids of `dims`.
pub fn estimate_lambda_max(s: &FilterBank, dims: Dims, cfg: &SpecNormConfig) -> Result<PowerEstimate> {
    let gd = dims.with_channels(s.coils);
    s.check_grid(gd)?;
    power::largest_eigenvalue(
        2 * gd.len(),
        |v| {
            let x = Grid::from_raw(gd, v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect());
            let y = normal_operator(&x, s).expect("dims checked above");
            y.as_slice().iter().flat_map(|z| [z.re, z.im]).collect()
        },
        cfg.power_iters,
        cfg.tol,
    )
}

/// Exact `λ_max(Conv_s̄^H Conv_s̄)` on grids of `dims`.
///
/// The operator is a multichannel circular convolution, so the DFT splits
/// it into one `r × Nc` symbol per frequency and `λ_max` is the largest
/// squared singular value over all symbols.
pub fn exact_lambda_max(s: &FilterBank, dims: Dims) -> Result<f64> {
    s.check_grid(dims.with_channels(s.coils))?;
    let (d1, d2) = (s.window.d1, s.window.d2);
    let tau = 2.0 * std::f64::consts::PI;
    let mut worst: f64 = 0.0;
    for k1 in 0..dims.rows {
        for k2 in 0..dims.cols {
            let phase: Vec<Complex64> = (0..d1 * d2)
                .map(|t| {
                    let f = k1 as f64 * (t / d2) as f64 / dims.rows as f64 + k2 as f64 * (t % d2) as f64 / dims.cols as f64;
                    Complex64::from_polar(1.0, tau * f)
                })
                .collect();
            let sym = DMatrix::from_fn(s.count, s.coils, |j, c| {
                let taps = &s.coeffs[s.offset(j, c, 0, 0)..][..d1 * d2];
                taps.iter().zip(&phase).map(|(v, p)| v * p).sum::<Complex64>()
            });
            let top = sym.singular_values().max();
            worst = worst.max(top * top);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct SpecNormOutcome {
    pub filters: FilterBank,
    /// Estimate before rescaling.
    pub lambda_before: f64,
    /// Applied coefficient scale (1.0 when unchanged).
    pub scale: f64,
}

/// Rescales `s` so that `λ_max(Conv_s̄^H Conv_s̄) ≤ 1 - ε` on grids of `dims`.
pub fn spectral_normalize(s: &FilterBank, dims: Dims, cfg: &SpecNormConfig) -> Result<SpecNormOutcome> {
    cfg.validate()?;
    let lambda = exact_lambda_max(s, dims)?;
    let mut filters = s.clone();
    let mut scale = 1.0;
    if lambda > cfg.budget() {
        scale = (cfg.budget() / lambda).sqrt();
        filters.scale(scale);
    }
    Ok(SpecNormOutcome { filters, lambda_before: lambda, scale })
}

//! Complex multi-channel grids.
//!
//! A [`Grid`] stores `rows × cols × channels` complex samples in row-major
//! order with the channel index varying fastest:
//! `index(row, col, ch) = (row * cols + col) * channels + ch`.
//! The same type carries k-space data, image-domain data and the
//! `r`-channel output of a filter bank; [`KSpaceGrid`] and [`ImageGrid`]
//! name the role at API boundaries.

use std::cell::Cell;
use std::fmt;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Grid shape: `rows × cols × channels`, all strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl Dims {
    pub fn new(rows: usize, cols: usize, channels: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(Error::InvalidDims(format!(
                "dims must be positive, got {rows}x{cols}x{channels}"
            )));
        }
        rows.checked_mul(cols)
            .and_then(|p| p.checked_mul(channels))
            .ok_or_else(|| Error::InvalidDims("grid size overflows usize".into()))?;
        Ok(Self { rows, cols, channels })
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same spatial extent with a different channel count.
    pub fn with_channels(&self, channels: usize) -> Self {
        Self { rows: self.rows, cols: self.cols, channels }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.rows, self.cols, self.channels)
    }
}

/// Dense complex grid. Entries are always finite.
#[derive(PartialEq)]
pub struct Grid {
    dims: Dims,
    data: Vec<Complex64>,
}

/// k-space data (`x̂`, `y_Ω`).
pub type KSpaceGrid = Grid;
/// Image-domain data.
pub type ImageGrid = Grid;

impl Grid {
    pub fn zeros(dims: Dims) -> Self {
        memtrack::on_alloc();
        Self { dims, data: vec![Complex64::new(0.0, 0.0); dims.len()] }
    }

    /// Wraps `data`; rejects length mismatches and non-finite entries.
    pub fn from_vec(dims: Dims, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "payload has {} entries, dims {dims} need {}",
                data.len(),
                dims.len()
            )));
        }
        if let Some(pos) = data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite(format!("grid entry {pos} is not finite")));
        }
        memtrack::on_alloc();
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> Complex64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for r in 0..dims.rows {
            for c in 0..dims.cols {
                for ch in 0..dims.channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::from_vec(dims, data)
    }

    /// Internal constructor for results of arithmetic on finite grids.
    pub(crate) fn from_raw(dims: Dims, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        memtrack::on_alloc();
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<Complex64> {
        std::mem::take(&mut self.data)
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.dims.cols + col) * self.dims.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> Complex64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: Complex64) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    /// Checks the finiteness invariant, e.g. after an external mutation.
    pub fn validate(&self) -> Result<()> {
        if self.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("grid contains NaN or Inf".into()));
        }
        Ok(())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `⟨self, other⟩ = Σ conj(self)·other`.
    pub fn dot(&self, other: &Grid) -> Complex64 {
        debug_assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum()
    }

    /// Real inner product `Re⟨self, other⟩`, the pairing used for gradients.
    pub fn real_dot(&self, other: &Grid) -> f64 {
        debug_assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| a.re * b.re + a.im * b.im).sum()
    }

    pub fn distance(&self, other: &Grid) -> f64 {
        debug_assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|z| *z *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Grid {
        Grid::from_raw(self.dims, self.data.iter().map(|z| z * alpha).collect())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Grid) {
        debug_assert_eq!(self.dims, other.dims);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b * alpha);
    }

    /// `self += alpha * other` with a complex coefficient.
    pub fn axpy_c(&mut self, alpha: Complex64, other: &Grid) {
        debug_assert_eq!(self.dims, other.dims);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += alpha * b);
    }

    pub fn sub(&self, other: &Grid) -> Grid {
        debug_assert_eq!(self.dims, other.dims);
        Grid::from_raw(self.dims, self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &Grid) -> Grid {
        debug_assert_eq!(self.dims, other.dims);
        Grid::from_raw(self.dims, self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
    }

    pub fn copy_from(&mut self, other: &Grid) {
        debug_assert_eq!(self.dims, other.dims);
        self.data.copy_from_slice(&other.data);
    }

    /// Channel `ch` as a single-channel grid.
    pub fn channel(&self, ch: usize) -> Grid {
        let d = self.dims;
        let data = (0..d.pixels()).map(|p| self.data[p * d.channels + ch]).collect();
        Grid::from_raw(d.with_channels(1), data)
    }

    /// Multiplies channel `ch` by `phase`.
    pub fn rotate_channel(&mut self, ch: usize, phase: Complex64) {
        let nc = self.dims.channels;
        for p in 0..self.dims.pixels() {
            self.data[p * nc + ch] *= phase;
        }
    }

    /// Bitwise comparison of payloads (distinguishes `0.0` and `-0.0`).
    pub fn bitwise_eq(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits())
    }
}

impl Clone for Grid {
    fn clone(&self) -> Self {
        memtrack::on_alloc();
        Self { dims: self.dims, data: self.data.clone() }
    }
}

impl Drop for Grid {
    fn drop(&mut self) {
        memtrack::on_drop();
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid({}, norm={:.6e})", self.dims, self.norm())
    }
}

/// Real-valued 2-D grid, e.g. a coil-combined magnitude image.
#[derive(Debug, Clone, PartialEq)]
pub struct RealGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealGrid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDims(format!("real grid dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "real grid payload {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// Live-buffer accounting for [`Grid`] allocations on the current thread.
///
/// Every construction or clone of a `Grid` counts as one live buffer until
/// it is dropped. Used to check that implicit backpropagation needs a
/// bounded number of grid-sized buffers regardless of solve length.
pub mod memtrack {
    use super::Cell;

    thread_local! {
        static LIVE: Cell<isize> = const { Cell::new(0) };
        static PEAK: Cell<isize> = const { Cell::new(0) };
    }

    pub(crate) fn on_alloc() {
        LIVE.with(|l| {
            let v = l.get() + 1;
            l.set(v);
            PEAK.with(|p| {
                if v > p.get() {
                    p.set(v)
                }
            });
        });
    }

    pub(crate) fn on_drop() {
        LIVE.with(|l| l.set(l.get() - 1));
    }

    /// Buffers currently alive on this thread.
    pub fn live() -> isize {
        LIVE.with(|l| l.get())
    }

    /// Resets the peak to the current live count and returns that count.
    pub fn reset_peak() -> isize {
        let v = live();
        PEAK.with(|p| p.set(v));
        v
    }

    pub fn peak() -> isize {
        PEAK.with(|p| p.get())
    }

    /// Runs `f` and returns its result together with the peak number of
    /// additional buffers alive at any point during the call.
    pub fn measure<T>(f: impl FnOnce() -> T) -> (T, usize) {
        let base = reset_peak();
        let out = f();
        let extra = (peak() - base).max(0) as usize;
        (out, extra)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn layout_is_row_major_channel_fastest() {
        let d = Dims::new(2, 3, 2).unwrap();
        let g = Grid::from_fn(d, |r, col, ch| c((r * 100 + col * 10 + ch) as f64, 0.0)).unwrap();
        assert_eq!(g.as_slice()[g.index(1, 2, 1)].re, 121.0);
        assert_eq!(g.index(0, 1, 0), 2);
        assert_eq!(g.index(1, 0, 0), 6);
    }

    #[test]
    fn rejects_non_finite_and_zero_dims() {
        assert!(Dims::new(0, 2, 1).is_err());
        let d = Dims::new(1, 2, 1).unwrap();
        assert!(Grid::from_vec(d, vec![c(1.0, 0.0), c(f64::NAN, 0.0)]).is_err());
        assert!(Grid::from_vec(d, vec![c(1.0, 0.0)]).is_err());
    }

    #[test]
    fn memtrack_counts_live_buffers() {
        let d = Dims::new(4, 4, 1).unwrap();
        let ((), extra) = memtrack::measure(|| {
            let a = Grid::zeros(d);
            let b = a.clone();
            drop(a);
            let _c = b.scaled(2.0);
        });
        assert_eq!(extra, 2);
    }
}

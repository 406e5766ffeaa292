//! Cartesian sampling masks.
//!
//! A mask marks sampled `(row, col)` locations and is broadcast over coils.
//! The sampled set is `Ω` for measured data, or one of the training subsets
//! `Λ ⊆ Ω` (network input) and `Γ = Ω ∖ Λ` (held back for the loss).

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid};

/// Axis-aligned rectangle of grid positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Rect {
    /// Rectangle of `rows × cols` centered on `(n1/2, n2/2)`, the DC
    /// position of the centered transform.
    pub fn centered(n1: usize, n2: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows > n1 || cols > n2 {
            return Err(Error::InvalidMask(format!("calibration region {rows}x{cols} does not fit {n1}x{n2}")));
        }
        Ok(Self { row0: n1 / 2 - rows / 2, col0: n2 / 2 - cols / 2, rows, cols })
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row0 + self.rows && col >= self.col0 && col < self.col0 + self.cols
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }
}

/// Which index set a mask represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskRole {
    Omega,
    Lambda,
    Gamma,
}

impl MaskRole {
    pub fn tag(self) -> u8 {
        match self {
            MaskRole::Omega => 0,
            MaskRole::Lambda => 1,
            MaskRole::Gamma => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(MaskRole::Omega),
            1 => Some(MaskRole::Lambda),
            2 => Some(MaskRole::Gamma),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
    acs: Option<Rect>,
    accel: f64,
    role: MaskRole,
}

impl SamplingMask {
    /// Validates `acs ⊆ keep` and, except for `Γ` masks, a nonempty sampled set.
    pub fn new(
        rows: usize,
        cols: usize,
        keep: Vec<bool>,
        acs: Option<Rect>,
        accel: f64,
        role: MaskRole,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidMask(format!("mask dims must be positive, got {rows}x{cols}")));
        }
        if keep.len() != rows * cols {
            return Err(Error::InvalidMask(format!("{} keep flags for {rows}x{cols}", keep.len())));
        }
        if let Some(a) = acs {
            if a.row0 + a.rows > rows || a.col0 + a.cols > cols {
                return Err(Error::InvalidMask("calibration region outside mask".into()));
            }
            for r in a.row0..a.row0 + a.rows {
                for c in a.col0..a.col0 + a.cols {
                    if !keep[r * cols + c] {
                        return Err(Error::InvalidMask(format!("calibration point ({r}, {c}) is not sampled")));
                    }
                }
            }
        }
        if role != MaskRole::Gamma && !keep.iter().any(|k| *k) {
            return Err(Error::InvalidMask("sampled set is empty".into()));
        }
        if !(accel >= 1.0) {
            return Err(Error::InvalidMask(format!("acceleration {accel} < 1")));
        }
        Ok(Self { rows, cols, keep, acs, accel, role })
    }

    /// Every location sampled.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, keep: vec![true; rows * cols], acs: None, accel: 1.0, role: MaskRole::Omega }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn acs(&self) -> Option<Rect> {
        self.acs
    }

    pub fn accel(&self) -> f64 {
        self.accel
    }

    pub fn role(&self) -> MaskRole {
        self.role
    }

    pub fn with_role(mut self, role: MaskRole) -> Self {
        self.role = role;
        self
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    #[inline]
    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.cols + col]
    }

    /// `|Ω|` in grid positions.
    pub fn count(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    /// Sampled positions as flat indices `row·cols + col`.
    pub fn indices(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i).collect()
    }

    pub fn is_subset_of(&self, other: &SamplingMask) -> bool {
        self.same_shape(other) && self.keep.iter().zip(&other.keep).all(|(a, b)| !*a || *b)
    }

    pub fn same_shape(&self, other: &SamplingMask) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn check_grid(&self, dims: Dims) -> Result<()> {
        if dims.rows != self.rows || dims.cols != self.cols {
            return Err(Error::DimMismatch(format!(
                "mask {}x{} vs grid {}x{}",
                self.rows, self.cols, dims.rows, dims.cols
            )));
        }
        Ok(())
    }

    /// `M x`: copies sampled entries, zeros the rest.
    pub fn apply(&self, x: &Grid) -> Result<Grid> {
        self.check_grid(x.dims())?;
        let mut out = x.clone();
        self.zero_where(&mut out, false);
        Ok(out)
    }

    /// `(I - M) x`: zeros sampled entries.
    pub fn apply_complement(&self, x: &Grid) -> Result<Grid> {
        self.check_grid(x.dims())?;
        let mut out = x.clone();
        self.zero_where(&mut out, true);
        Ok(out)
    }

    /// Zeros every pixel whose keep flag equals `kept`.
    pub fn zero_where(&self, x: &mut Grid, kept: bool) {
        let nc = x.dims().channels;
        for (p, k) in self.keep.iter().enumerate() {
            if *k == kept {
                x.as_mut_slice()[p * nc..(p + 1) * nc]
                    .iter_mut()
                    .for_each(|z| *z = num_complex::Complex64::new(0.0, 0.0));
            }
        }
    }

    /// Extracts the calibration block of `x` as its own grid.
    pub fn acs_block(&self, x: &Grid) -> Result<Grid> {
        self.check_grid(x.dims())?;
        let a = self.acs.ok_or_else(|| Error::InvalidMask("mask has no calibration region".into()))?;
        let d = x.dims();
        Grid::from_fn(Dims::new(a.rows, a.cols, d.channels)?, |r, c, ch| x.get(a.row0 + r, a.col0 + c, ch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_rect_covers_dc() {
        let r = Rect::centered(64, 1, 8, 1).unwrap();
        assert_eq!((r.row0, r.rows), (28, 8));
        assert!(r.contains(32, 0));
        let r = Rect::centered(7, 7, 3, 3).unwrap();
        assert_eq!((r.row0, r.col0), (2, 2));
    }

    #[test]
    fn acs_must_be_sampled() {
        let keep = vec![true, false, true, true];
        let acs = Some(Rect { row0: 0, col0: 0, rows: 2, cols: 1 });
        assert!(SamplingMask::new(4, 1, keep.clone(), acs, 2.0, MaskRole::Omega).is_err());
        let acs = Some(Rect { row0: 2, col0: 0, rows: 2, cols: 1 });
        assert!(SamplingMask::new(4, 1, keep, acs, 2.0, MaskRole::Omega).is_ok());
    }

    #[test]
    fn empty_set_only_allowed_for_gamma() {
        assert!(SamplingMask::new(2, 1, vec![false, false], None, 1.0, MaskRole::Omega).is_err());
        assert!(SamplingMask::new(2, 1, vec![false, false], None, 1.0, MaskRole::Gamma).is_ok());
    }
}

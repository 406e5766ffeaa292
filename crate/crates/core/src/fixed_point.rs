//! Data-consistency projection, the projected-gradient map `F = P ∘ G`
//! and fixed-point solvers.

use std::collections::VecDeque;

use log::debug;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::mask::SamplingMask;

/// The gradient step `G` of a projected-gradient iteration.
pub trait ResidualMap {
    fn residual(&self, x: &Grid) -> Result<Grid>;
}

impl<F> ResidualMap for F
where
    F: Fn(&Grid) -> Result<Grid>,
{
    fn residual(&self, x: &Grid) -> Result<Grid> {
        self(x)
    }
}

/// `P(r) = (I - M_Ω) r + y_Ω`.
///
/// Sampled entries are copied from `y` bit for bit; entries of `y` off
/// `Ω` are ignored.
pub fn project_dc(r: &Grid, mask: &SamplingMask, y: &Grid) -> Result<Grid> {
    let mut out = r.clone();
    project_dc_in_place(&mut out, mask, y)?;
    Ok(out)
}

pub fn project_dc_in_place(x: &mut Grid, mask: &SamplingMask, y: &Grid) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::DimMismatch(format!("iterate {} vs data {}", x.dims(), y.dims())));
    }
    mask.check_grid(x.dims())?;
    let nc = x.dims().channels;
    let ys = y.as_slice();
    let xs = x.as_mut_slice();
    for (p, k) in mask.keep().iter().enumerate() {
        if *k {
            xs[p * nc..(p + 1) * nc].copy_from_slice(&ys[p * nc..(p + 1) * nc]);
        }
    }
    Ok(())
}

/// Zero-filled data `M_Ω y`, the default starting point `x⁰`.
pub fn zero_filled(y: &Grid, mask: &SamplingMask) -> Result<Grid> {
    project_dc(&Grid::zeros(y.dims()), mask, y)
}

/// One projected-gradient step `P(G(x))`.
pub fn pgd_map<G: ResidualMap + ?Sized>(x: &Grid, g: &G, mask: &SamplingMask, y: &Grid) -> Result<Grid> {
    let mut r = g.residual(x)?;
    project_dc_in_place(&mut r, mask, y)?;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Plain,
    Anderson,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointConfig {
    /// Stop when `‖F(x) - x‖ / ‖x‖ ≤ tol`.
    pub tol: f64,
    pub max_iters: usize,
    pub solver: Solver,
    pub anderson_memory: usize,
    pub anderson_damping: f64,
    /// Ridge added to the Anderson normal equations, relative to their
    /// largest diagonal entry.
    pub anderson_reg: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 500,
            solver: Solver::Plain,
            anderson_memory: 5,
            anderson_damping: 1.0,
            anderson_reg: 1e-8,
        }
    }
}

impl FixedPointConfig {
    pub fn anderson() -> Self {
        Self { solver: Solver::Anderson, ..Self::default() }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.max_iters = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig(format!("tol {} must be >= 0", self.tol)));
        }
        if self.solver == Solver::Anderson {
            if self.anderson_memory == 0 {
                return Err(Error::InvalidConfig("anderson memory must be >= 1".into()));
            }
            if !(self.anderson_damping > 0.0 && self.anderson_damping <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "anderson damping {} not in (0, 1]",
                    self.anderson_damping
                )));
            }
            if !(self.anderson_reg >= 0.0) {
                return Err(Error::InvalidConfig("anderson ridge must be >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointReport {
    /// Final iterate. Always an output of the map, so data consistency
    /// holds exactly when the map ends in a projection.
    pub solution: Grid,
    /// `‖F(x_k) - x_k‖ / ‖x_k‖` for every iterate examined.
    pub residuals: Vec<f64>,
    /// `‖F(x_k) - x_k‖` for the same iterates.
    pub step_norms: Vec<f64>,
    /// Number of iterate updates before the stopping test passed (or the cap).
    pub iters: usize,
    /// Number of map evaluations.
    pub map_evals: usize,
    pub converged: bool,
    /// Relative residual of `solution` itself.
    pub final_residual: f64,
    /// Largest ratio of consecutive step norms.
    pub contraction_est: f64,
    /// Anderson steps that fell back to a plain step.
    pub fallbacks: usize,
}

fn relative(step: f64, base: f64) -> f64 {
    if base > 0.0 {
        step / base
    } else {
        step
    }
}

/// Iterates `x ← map(x)` (optionally Anderson-accelerated) from `x0`.
///
/// Non-convergence is reported through `converged = false`, not as an error.
pub fn solve_fixed_point(
    x0: Grid,
    map: impl FnMut(&Grid) -> Result<Grid>,
    cfg: &FixedPointConfig,
) -> Result<FixedPointReport> {
    solve_scaled(x0, map, cfg, None)
}

/// [`solve_fixed_point`] with residuals taken relative to a fixed `scale`
/// instead of the current iterate's norm.
pub(crate) fn solve_scaled(
    x0: Grid,
    mut map: impl FnMut(&Grid) -> Result<Grid>,
    cfg: &FixedPointConfig,
    scale: Option<f64>,
) -> Result<FixedPointReport> {
    cfg.validate()?;
    let relative = |step: f64, x: &Grid| relative(step, scale.unwrap_or_else(|| x.norm()));
    let mut residuals = Vec::new();
    let mut step_norms: Vec<f64> = Vec::new();
    let mut map_evals = 0;
    let mut fallbacks = 0;
    let mut history = AndersonHistory::new(cfg.anderson_memory);

    let mut x = x0;
    // whether `x` was produced by `map` (and so inherits its projection)
    let mut from_map = false;
    let mut iters = 0;

    loop {
        let gx = map(&x)?;
        map_evals += 1;
        let step = gx.distance(&x);
        let res = relative(step, &x);
        residuals.push(res);
        step_norms.push(step);

        if !res.is_finite() {
            debug!("fixed-point iteration diverged at update {iters}");
            return Ok(finish(x, residuals, step_norms, iters, map_evals, false, res, fallbacks));
        }
        if res <= cfg.tol {
            if from_map {
                // `gx` is one contraction step closer; `res` bounds its residual
                return Ok(finish(gx, residuals, step_norms, iters, map_evals, true, res, fallbacks));
            }
            // polish: return the map output, measuring its own residual
            let ggx = map(&gx)?;
            map_evals += 1;
            let final_res = relative(ggx.distance(&gx), &gx);
            let ok = final_res <= cfg.tol;
            return Ok(finish(gx, residuals, step_norms, iters, map_evals, ok, final_res, fallbacks));
        }
        if iters >= cfg.max_iters {
            if from_map {
                return Ok(finish(x, residuals, step_norms, iters, map_evals, false, res, fallbacks));
            }
            let g2 = map(&gx)?;
            map_evals += 1;
            let final_res = relative(g2.distance(&gx), &gx);
            return Ok(finish(gx, residuals, step_norms, iters, map_evals, false, final_res, fallbacks));
        }

        iters += 1;
        match cfg.solver {
            Solver::Plain => {
                x = gx;
                from_map = true;
            }
            Solver::Anderson => {
                let f = gx.sub(&x);
                history.push(&x, &gx, &f);
                match history.extrapolate(&x, &gx, &f, cfg) {
                    Some(next) => {
                        x = next;
                        from_map = false;
                    }
                    None => {
                        fallbacks += 1;
                        debug!("anderson least squares broke down at update {iters}; taking a plain step");
                        history.clear();
                        x = gx;
                        from_map = true;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    solution: Grid,
    residuals: Vec<f64>,
    step_norms: Vec<f64>,
    iters: usize,
    map_evals: usize,
    converged: bool,
    final_residual: f64,
    fallbacks: usize,
) -> FixedPointReport {
    let contraction_est = step_norms
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max);
    FixedPointReport {
        solution,
        residuals,
        step_norms,
        iters,
        map_evals,
        converged,
        final_residual,
        contraction_est,
        fallbacks,
    }
}

/// Differences of the last `m + 1` iterates, map values and residuals.
struct AndersonHistory {
    memory: usize,
    last: Option<(Grid, Grid, Grid)>,
    dx: VecDeque<Grid>,
    dg: VecDeque<Grid>,
    df: VecDeque<Grid>,
}

impl AndersonHistory {
    fn new(memory: usize) -> Self {
        Self { memory, last: None, dx: VecDeque::new(), dg: VecDeque::new(), df: VecDeque::new() }
    }

    fn clear(&mut self) {
        self.last = None;
        self.dx.clear();
        self.dg.clear();
        self.df.clear();
    }

    fn push(&mut self, x: &Grid, gx: &Grid, f: &Grid) {
        if let Some((px, pg, pf)) = self.last.take() {
            self.dx.push_back(x.sub(&px));
            self.dg.push_back(gx.sub(&pg));
            self.df.push_back(f.sub(&pf));
            if self.df.len() > self.memory {
                self.dx.pop_front();
                self.dg.pop_front();
                self.df.pop_front();
            }
        }
        self.last = Some((x.clone(), gx.clone(), f.clone()));
    }

    /// `x⁺ = (1-β)(x - ΔX γ) + β(g - ΔG γ)` with `γ = argmin ‖f - ΔF γ‖`.
    fn extrapolate(&self, x: &Grid, gx: &Grid, f: &Grid, cfg: &FixedPointConfig) -> Option<Grid> {
        let m = self.df.len();
        if m == 0 {
            return Some(gx.clone());
        }
        let gram = DMatrix::from_fn(m, m, |i, j| self.df[i].dot(&self.df[j]));
        let rhs = DVector::from_fn(m, |i, _| self.df[i].dot(f));
        let max_diag = (0..m).map(|i| gram[(i, i)].re).fold(0.0, f64::max);
        if !(max_diag > 0.0) || !max_diag.is_finite() {
            return None;
        }
        let mut reg = gram;
        for i in 0..m {
            reg[(i, i)] += Complex64::new(cfg.anderson_reg * max_diag, 0.0);
        }
        let gamma = reg.cholesky()?.solve(&rhs);
        if gamma.iter().any(|g| !g.re.is_finite() || !g.im.is_finite()) {
            return None;
        }
        let beta = cfg.anderson_damping;
        let mut next = gx.clone();
        for (i, g) in gamma.iter().enumerate() {
            next.axpy_c(-g, &self.dg[i]);
        }
        if beta < 1.0 {
            let mut plain = x.clone();
            for (i, g) in gamma.iter().enumerate() {
                plain.axpy_c(-g, &self.dx[i]);
            }
            next.scale(beta);
            next.axpy(1.0 - beta, &plain);
        }
        Some(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;
    use crate::mask::MaskRole;
    use crate::rng::seeded_grid;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn scalar(v: f64) -> Grid {
        Grid::from_vec(Dims::new(1, 1, 1).unwrap(), vec![c(v)]).unwrap()
    }

    fn affine(x: &Grid) -> Result<Grid> {
        Ok(scalar(0.5 * x.get(0, 0, 0).re + 1.0))
    }

    #[test]
    fn projection_replaces_sampled_entries() {
        let d = Dims::new(2, 1, 1).unwrap();
        let r = Grid::from_vec(d, vec![c(1.0), c(2.0)]).unwrap();
        let y = Grid::from_vec(d, vec![c(7.0), c(99.0)]).unwrap();
        let m = SamplingMask::new(2, 1, vec![true, false], None, 2.0, MaskRole::Omega).unwrap();
        let p = project_dc(&r, &m, &y).unwrap();
        assert_eq!(p.as_slice(), &[c(7.0), c(2.0)]);
        assert!(project_dc(&p, &m, &y).unwrap().bitwise_eq(&p));
    }

    #[test]
    fn full_mask_projection_returns_data() {
        let d = Dims::new(3, 2, 2).unwrap();
        let r = seeded_grid(d, 1);
        let y = seeded_grid(d, 2);
        assert!(project_dc(&r, &SamplingMask::full(3, 2), &y).unwrap().bitwise_eq(&y));
    }

    #[test]
    fn projection_rejects_mismatch() {
        let r = Grid::zeros(Dims::new(2, 2, 1).unwrap());
        let y = Grid::zeros(Dims::new(2, 2, 2).unwrap());
        assert!(project_dc(&r, &SamplingMask::full(2, 2), &y).is_err());
    }

    #[test]
    fn plain_solver_on_scalar_affine_map() {
        let rep = solve_fixed_point(scalar(0.0), affine, &FixedPointConfig::default().with_tol(1e-10)).unwrap();
        assert!(rep.converged);
        assert!(rep.iters <= 40, "{}", rep.iters);
        assert!((rep.solution.get(0, 0, 0).re - 2.0).abs() < 1e-9);
        assert!(*rep.residuals.last().unwrap() < 1e-10);
        assert!((rep.contraction_est - 0.5).abs() < 1e-12);
    }

    #[test]
    fn anderson_is_exact_on_linear_scalar_map() {
        let cfg = FixedPointConfig { anderson_memory: 1, ..FixedPointConfig::anderson() }.with_tol(1e-12);
        let rep = solve_fixed_point(scalar(0.0), affine, &cfg).unwrap();
        assert!(rep.converged);
        assert!(rep.iters <= 3, "{}", rep.iters);
        assert!((rep.solution.get(0, 0, 0).re - 2.0).abs() <= 1e-14);
    }

    #[test]
    fn expansive_map_reports_non_convergence() {
        let cfg = FixedPointConfig::default().with_tol(1e-8).with_max_iters(200);
        let rep = solve_fixed_point(scalar(1.0), |x: &Grid| Ok(x.scaled(1.1)), &cfg).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iters, 200);
    }

    #[test]
    fn zero_step_pgd_is_projection() {
        let d = Dims::new(4, 3, 2).unwrap();
        let x = seeded_grid(d, 3);
        let y = seeded_grid(d, 4);
        let m = SamplingMask::new(4, 3, (0..12).map(|i| i % 3 == 0).collect(), None, 3.0, MaskRole::Omega).unwrap();
        let identity = |g: &Grid| -> Result<Grid> { Ok(g.clone()) };
        assert!(pgd_map(&x, &identity, &m, &y).unwrap().bitwise_eq(&project_dc(&x, &m, &y).unwrap()));
    }

    #[test]
    fn anderson_breakdown_falls_back() {
        // a translation has constant residual, so residual differences vanish
        let cfg = FixedPointConfig::anderson().with_max_iters(5);
        let shift = |x: &Grid| -> Result<Grid> { Ok(scalar(x.get(0, 0, 0).re + 1.0)) };
        let rep = solve_fixed_point(scalar(0.0), shift, &cfg).unwrap();
        assert!(!rep.converged);
        assert!(rep.fallbacks >= 1);
    }
}

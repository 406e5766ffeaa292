//! Implicit differentiation at the fixed point.
//!
//! With `F = P ∘ G` and `x∞ = F(x∞)`, the loss gradient is
//! `∂ℓ/∂p = (∂G/∂p)^T (I − M) v` where `v` solves `v = J_F^T v + ∂ℓ/∂x∞`.
//! The projection has Jacobian `I − M` (self-adjoint), so
//! `J_F^T u = J_G^T (I − M) u`. Nothing from the forward iterations is kept.

use log::debug;

use crate::error::{Error, Result};
use crate::fixed_point::{pgd_map, solve_fixed_point, solve_scaled, zero_filled, FixedPointConfig, FixedPointReport, Solver};
use crate::grid::{memtrack, Grid};
use crate::mask::SamplingMask;
use crate::networks::NetworkParams;
use crate::train::{loss_eval, LossKind};

#[derive(Debug, Clone)]
pub struct AdjointSolveReport {
    pub v: Grid,
    /// `‖v_k − (J^T v_k + g)‖ / ‖g‖` per iteration.
    pub residuals: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
}

/// Solves `(I − J_F^T) v = g` at `xinf` by the Neumann recursion
/// `v ← J_F^T v + g`, starting from `v = g`.
///
/// Uses `cfg.tol` and `cfg.max_iters`; the stopping test is relative to
/// `‖g‖`. Non-convergence is reported, not raised. With
/// `cfg.solver = Anderson` the recursion is accelerated, at the cost of
/// `3·anderson_memory` extra grids of history.
pub fn adjoint_solve(
    xinf: &Grid,
    p: &NetworkParams,
    mask: &SamplingMask,
    g: &Grid,
    cfg: &FixedPointConfig,
) -> Result<AdjointSolveReport> {
    cfg.validate()?;
    if g.dims() != xinf.dims() {
        return Err(Error::DimMismatch(format!("cotangent {} vs fixed point {}", g.dims(), xinf.dims())));
    }
    mask.check_grid(xinf.dims())?;
    let gnorm = g.norm();
    if gnorm == 0.0 {
        return Ok(AdjointSolveReport { v: Grid::zeros(g.dims()), residuals: vec![0.0], iters: 0, converged: true });
    }
    if cfg.solver == Solver::Anderson {
        let step = |v: &Grid| -> Result<Grid> {
            let mut seed = v.clone();
            mask.zero_where(&mut seed, true);
            let mut next = p.vjp_input(xinf, &seed)?;
            mask.zero_where(&mut next, true);
            next.axpy(1.0, g);
            Ok(next)
        };
        let rep = solve_scaled(g.clone(), step, cfg, Some(gnorm))?;
        return Ok(AdjointSolveReport { v: rep.solution, residuals: rep.residuals, iters: rep.iters.max(1), converged: rep.converged });
    }
    let mut v = g.clone();
    let mut residuals = Vec::new();
    let mut iters = 0;
    loop {
        let mut seed = v.clone();
        mask.zero_where(&mut seed, true);
        let mut next = p.vjp_input(xinf, &seed)?;
        drop(seed);
        mask.zero_where(&mut next, true);
        next.axpy(1.0, g);
        let res = next.distance(&v) / gnorm;
        residuals.push(res);
        iters += 1;
        v = next;
        if !res.is_finite() {
            debug!("adjoint recursion diverged after {iters} iterations");
            return Ok(AdjointSolveReport { v, residuals, iters, converged: false });
        }
        if res <= cfg.tol {
            return Ok(AdjointSolveReport { v, residuals, iters, converged: true });
        }
        if iters >= cfg.max_iters {
            return Ok(AdjointSolveReport { v, residuals, iters, converged: false });
        }
    }
}

/// Parameter gradient together with backward-solve diagnostics.
#[derive(Debug, Clone)]
pub struct ParamGradient {
    pub grad: Vec<f64>,
    pub adjoint_iters: usize,
    pub adjoint_residual: f64,
}

/// `∂ℓ/∂p` from the loss cotangent `g = ∂ℓ/∂x∞`. `y` is unused by the
/// gradient itself (the projection's data term is constant) but is checked
/// for shape so callers cannot mix up problems.
pub fn param_gradient(
    xinf: &Grid,
    p: &NetworkParams,
    mask: &SamplingMask,
    y: &Grid,
    g: &Grid,
    cfg: &FixedPointConfig,
) -> Result<ParamGradient> {
    if y.dims() != xinf.dims() {
        return Err(Error::DimMismatch(format!("data {} vs fixed point {}", y.dims(), xinf.dims())));
    }
    let adj = adjoint_solve(xinf, p, mask, g, cfg)?;
    let residual = adj.residuals.last().copied().unwrap_or(0.0);
    if !adj.converged {
        return Err(Error::NotConverged(format!(
            "adjoint solve stopped after {} iterations at residual {residual:.3e}",
            adj.iters
        )));
    }
    let mut seed = adj.v;
    mask.zero_where(&mut seed, true);
    let grad = p.vjp(xinf, &seed)?.wrt_params;
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient("parameter gradient has non-finite entries".into()));
    }
    Ok(ParamGradient { grad, adjoint_iters: adj.iters, adjoint_residual: residual })
}

/// [`param_gradient`] plus the peak number of extra grid-sized buffers
/// (grids and real tensors) alive during the call.
pub fn param_gradient_tracked(
    xinf: &Grid,
    p: &NetworkParams,
    mask: &SamplingMask,
    y: &Grid,
    g: &Grid,
    cfg: &FixedPointConfig,
) -> (Result<ParamGradient>, usize) {
    memtrack::measure(|| param_gradient(xinf, p, mask, y, g, cfg))
}

/// One learning problem: the fixed point uses data `y` with projection
/// onto `dc_mask`; the loss compares against `target` on `loss_mask`
/// (every entry when `None`).
#[derive(Debug, Clone)]
pub struct Problem {
    pub y: Grid,
    pub dc_mask: SamplingMask,
    pub target: Grid,
    pub loss_mask: Option<SamplingMask>,
    pub loss: LossKind,
}

impl Problem {
    pub fn solve(&self, p: &NetworkParams, cfg: &FixedPointConfig) -> Result<FixedPointReport> {
        let x0 = zero_filled(&self.y, &self.dc_mask)?;
        solve_fixed_point(x0, |x| pgd_map(x, p, &self.dc_mask, &self.y), cfg)
    }

    /// Loss at the fixed point, failing if the solve does not converge.
    pub fn loss(&self, p: &NetworkParams, cfg: &FixedPointConfig) -> Result<(f64, FixedPointReport)> {
        let rep = self.solve(p, cfg)?;
        if !rep.converged {
            return Err(Error::NotConverged(format!(
                "forward solve stopped after {} updates at residual {:.3e}",
                rep.iters, rep.final_residual
            )));
        }
        let (l, _) = loss_eval(&rep.solution, &self.target, self.loss_mask.as_ref(), self.loss)?;
        Ok((l, rep))
    }
}

/// Loss, gradient and iteration counts of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub forward: FixedPointReport,
    pub adjoint_iters: usize,
}

pub fn loss_and_gradient(
    problem: &Problem,
    p: &NetworkParams,
    fwd: &FixedPointConfig,
    bwd: &FixedPointConfig,
) -> Result<LossGradient> {
    let (loss, forward) = problem.loss(p, fwd)?;
    let (_, g) = loss_eval(&forward.solution, &problem.target, problem.loss_mask.as_ref(), problem.loss)?;
    let pg = param_gradient(&forward.solution, p, &problem.dc_mask, &problem.y, &g, bwd)?;
    Ok(LossGradient { loss, grad: pg.grad, forward, adjoint_iters: pg.adjoint_iters })
}

/// Gradient by backpropagating through `k` explicit iterations
/// `x_{i+1} = F(x_i)` from the zero-filled start. Stores every iterate.
pub fn unrolled_gradient(problem: &Problem, p: &NetworkParams, k: usize) -> Result<(f64, Vec<f64>)> {
    let mut xs = vec![zero_filled(&problem.y, &problem.dc_mask)?];
    for i in 0..k {
        let next = pgd_map(&xs[i], p, &problem.dc_mask, &problem.y)?;
        xs.push(next);
    }
    let (loss, mut gbar) = loss_eval(&xs[k], &problem.target, problem.loss_mask.as_ref(), problem.loss)?;
    let mut grad = vec![0.0; p.num_params()];
    for x in xs[..k].iter().rev() {
        problem.dc_mask.zero_where(&mut gbar, true);
        let cot = p.vjp(x, &gbar)?;
        grad.iter_mut().zip(&cot.wrt_params).for_each(|(a, b)| *a += b);
        gbar = cot.wrt_input;
    }
    Ok((loss, grad))
}

/// Which coordinates [`gradient_check`] probes.
#[derive(Debug, Clone)]
pub enum Coords {
    All,
    /// Every coordinate when there are at most this many, else an evenly
    /// strided subset of this size.
    Sampled(usize),
    Explicit(Vec<usize>),
}

impl Coords {
    fn resolve(&self, n: usize) -> Vec<usize> {
        match self {
            Coords::All => (0..n).collect(),
            Coords::Sampled(k) if n <= *k => (0..n).collect(),
            Coords::Sampled(k) => (0..*k).map(|i| i * n / k + (n / k) / 2).collect(),
            Coords::Explicit(v) => v.iter().copied().filter(|i| *i < n).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Some activation changes sign between the `±h` probes.
    pub kink: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<CoordCheck>,
    /// Largest relative error over non-kink coordinates.
    pub max_rel_err: f64,
    pub worst: Option<usize>,
    pub kinks: Vec<usize>,
}

impl GradCheckReport {
    pub fn kink_fraction(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.kinks.len() as f64 / self.entries.len() as f64
        }
    }
}

/// Compares `analytic` to central differences of the full pipeline
/// (fixed-point solve plus loss). The relative error of a coordinate is
/// `|a − n| / max(|n|, floor)` with `floor = 1e-8 · max_i |n_i|`.
pub fn compare_gradient(
    problem: &Problem,
    p: &NetworkParams,
    analytic: &[f64],
    h: f64,
    coords: &Coords,
    cfg: &FixedPointConfig,
) -> Result<GradCheckReport> {
    if analytic.len() != p.num_params() {
        return Err(Error::DimMismatch(format!("{} gradient entries for {} parameters", analytic.len(), p.num_params())));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!("finite-difference step {h}")));
    }
    let flat = p.to_flat();
    let mut probe = p.clone();
    let mut raw = Vec::new();
    for i in coords.resolve(flat.len()) {
        let mut f = flat.clone();
        f[i] = flat[i] + h;
        probe.set_flat(&f)?;
        let (up, rep_up) = problem.loss(&probe, cfg)?;
        let pat_up = probe.activation_pattern(&rep_up.solution)?;
        f[i] = flat[i] - h;
        probe.set_flat(&f)?;
        let (dn, rep_dn) = problem.loss(&probe, cfg)?;
        let pat_dn = probe.activation_pattern(&rep_dn.solution)?;
        raw.push((i, (up - dn) / (2.0 * h), pat_up != pat_dn));
    }
    let scale = raw.iter().fold(0.0f64, |m, r| m.max(r.1.abs()));
    let floor = (1e-8 * scale).max(f64::MIN_POSITIVE);
    let mut entries = Vec::with_capacity(raw.len());
    let mut kinks = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    for (i, n, kink) in raw {
        let a = analytic[i];
        let rel_err = (a - n).abs() / n.abs().max(floor);
        if kink {
            kinks.push(i);
        } else if rel_err > max_rel_err || worst.is_none() {
            max_rel_err = max_rel_err.max(rel_err);
            worst = Some(i);
        }
        entries.push(CoordCheck { index: i, analytic: a, numeric: n, rel_err, kink });
    }
    Ok(GradCheckReport { entries, max_rel_err, worst, kinks })
}

/// Implicit gradient at `p` checked against central differences with
/// step `h`. Both solves use `cfg` (use a tight tolerance, e.g. 1e-12).
pub fn gradient_check(
    problem: &Problem,
    p: &NetworkParams,
    h: f64,
    coords: &Coords,
    cfg: &FixedPointConfig,
) -> Result<GradCheckReport> {
    let lg = loss_and_gradient(problem, p, cfg, cfg)?;
    compare_gradient(problem, p, &lg.grad, h, coords, cfg)
}

/// Maximum relative error for each step in `hs`.
pub fn h_sweep(
    problem: &Problem,
    p: &NetworkParams,
    hs: &[f64],
    coords: &Coords,
    cfg: &FixedPointConfig,
) -> Result<Vec<(f64, f64)>> {
    let lg = loss_and_gradient(problem, p, cfg, cfg)?;
    hs.iter()
        .map(|&h| Ok((h, compare_gradient(problem, p, &lg.grad, h, coords, cfg)?.max_rel_err)))
        .collect()
}

//! Self-supervised training: mask splitting, the loss, ADAM, the epoch
//! loop and inference.
//!
//! In self-supervised mode each sample's measured set `Ω` is split into
//! `Λ` (network input and data consistency) and `Γ = Ω ∖ Λ`. The fixed
//! point is computed from `y_Λ` with projection onto `Λ`, and the loss is
//! taken against `y_Ω` on `Ω`. Supervised mode projects onto `Ω` and
//! compares with a fully sampled reference.

use std::fmt;

use log::{debug, warn};
use rand::seq::index::sample;
use rayon::prelude::*;

use crate::deq::{loss_and_gradient, LossGradient, Problem};
use crate::error::{Error, Result};
use crate::fft;
use crate::fixed_point::{pgd_map, solve_fixed_point, zero_filled, FixedPointConfig, FixedPointReport};
use crate::grid::{Dims, Grid};
use crate::hankel::SpecNormConfig;
use crate::mask::{MaskRole, SamplingMask};
use crate::metrics::{self, MetricsTriple};
use crate::networks::{lipschitz_normalize, NetworkParams};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// `‖M(x − t)‖² / ‖M t‖²`.
    NormalizedL2,
    /// `w·‖M(x − t)‖²/‖M t‖² + (1 − w)·‖M(x − t)‖₁/‖M t‖₁` with `w = l2_weight`.
    Mixed { l2_weight: f64 },
}

/// Loss and its cotangent `∂ℓ/∂x` (real-gradient convention: the grid
/// whose real inner product with a perturbation gives the first-order
/// change). `mask = None` compares every entry.
pub fn loss_eval(x: &Grid, target: &Grid, mask: Option<&SamplingMask>, kind: LossKind) -> Result<(f64, Grid)> {
    if x.dims() != target.dims() {
        return Err(Error::DimMismatch(format!("estimate {} vs target {}", x.dims(), target.dims())));
    }
    let mut diff = x.sub(target);
    let mut t = target.clone();
    if let Some(m) = mask {
        m.check_grid(x.dims())?;
        m.zero_where(&mut diff, false);
        m.zero_where(&mut t, false);
    }
    let t2 = t.norm_sqr();
    if t2 == 0.0 {
        return Err(Error::ZeroNormReference);
    }
    let l2 = diff.norm_sqr() / t2;
    match kind {
        LossKind::NormalizedL2 => {
            let g = diff.scaled(2.0 / t2);
            Ok((l2, g))
        }
        LossKind::Mixed { l2_weight: w } => {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidConfig(format!("mixed-loss weight {w} outside [0, 1]")));
            }
            let t1: f64 = t.as_slice().iter().map(|z| z.norm()).sum();
            let l1: f64 = diff.as_slice().iter().map(|z| z.norm()).sum::<f64>() / t1;
            let mut g = diff.scaled(2.0 * w / t2);
            for (gv, d) in g.as_mut_slice().iter_mut().zip(diff.as_slice()) {
                let n = d.norm();
                if n > 0.0 {
                    *gv += d * ((1.0 - w) / (t1 * n));
                }
            }
            Ok((w * l2 + (1.0 - w) * l1, g))
        }
    }
}

/// Splits `Ω` into `(Λ, Γ)`. The calibration region always goes to `Λ`;
/// of the remaining points `round(ρ·|Ω ∖ ACS|)` are drawn uniformly.
pub fn split_mask(mask: &SamplingMask, rho: f64, seed: u64) -> Result<(SamplingMask, SamplingMask)> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio {rho} outside (0, 1]")));
    }
    let acs = mask.acs();
    let free: Vec<usize> = mask
        .indices()
        .into_iter()
        .filter(|&i| !acs.is_some_and(|a| a.contains(i / mask.cols(), i % mask.cols())))
        .collect();
    let take = (rho * free.len() as f64).round() as usize;
    let mut lambda = vec![false; mask.keep().len()];
    if let Some(a) = acs {
        for r in a.row0..a.row0 + a.rows {
            for c in a.col0..a.col0 + a.cols {
                lambda[r * mask.cols() + c] = true;
            }
        }
    }
    let mut g = rng::rng(seed);
    for k in sample(&mut g, free.len(), take) {
        lambda[free[k]] = true;
    }
    let gamma: Vec<bool> = mask.keep().iter().zip(&lambda).map(|(o, l)| *o && !*l).collect();
    let l = SamplingMask::new(mask.rows(), mask.cols(), lambda, acs, mask.accel(), MaskRole::Lambda)?;
    let gm = SamplingMask::new(mask.rows(), mask.cols(), gamma, None, mask.accel(), MaskRole::Gamma)?;
    Ok((l, gm))
}

/// One training example.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub y_omega: Grid,
    pub mask_omega: SamplingMask,
    pub mask_lambda: SamplingMask,
    pub reference: Option<Grid>,
}

impl SamplePair {
    /// Zeroes `y` off `Ω` and splits `Ω` with ratio `rho`.
    pub fn new(y: &Grid, mask_omega: SamplingMask, rho: f64, seed: u64) -> Result<Self> {
        let y_omega = mask_omega.apply(y)?;
        let (mask_lambda, _) = split_mask(&mask_omega, rho, seed)?;
        Ok(Self { y_omega, mask_omega, mask_lambda, reference: None })
    }

    pub fn with_reference(mut self, reference: Grid) -> Self {
        self.reference = Some(reference);
        self
    }

    fn validate(&self) -> Result<()> {
        if !self.mask_lambda.is_subset_of(&self.mask_omega) {
            return Err(Error::InvalidMask("training input set is not inside the measured set".into()));
        }
        if let (Some(a), false) = (self.mask_omega.acs(), self.mask_lambda.acs().is_some()) {
            return Err(Error::InvalidMask(format!("calibration region {a:?} missing from the input set")));
        }
        self.mask_omega.check_grid(self.y_omega.dims())
    }

    /// The learning problem this sample defines in `mode`.
    pub fn problem(&self, mode: Mode, loss: LossKind) -> Result<Problem> {
        self.validate()?;
        match mode {
            Mode::SelfSupervised => Ok(Problem {
                y: self.mask_lambda.apply(&self.y_omega)?,
                dc_mask: self.mask_lambda.clone(),
                target: self.y_omega.clone(),
                loss_mask: Some(self.mask_omega.clone()),
                loss,
            }),
            Mode::Supervised => {
                let reference = self
                    .reference
                    .clone()
                    .ok_or_else(|| Error::InvalidConfig("supervised training needs reference grids".into()))?;
                Ok(Problem {
                    y: self.y_omega.clone(),
                    dc_mask: self.mask_omega.clone(),
                    target: reference,
                    loss_mask: None,
                    loss,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    SelfSupervised,
    Supervised,
}

/// What to do with a sample whose forward or backward solve fails to converge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailurePolicy {
    Skip,
    Abort,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rho: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub mode: Mode,
    /// Re-normalize after every `norm_every` ADAM steps; 0 disables.
    pub norm_every: usize,
    pub norm: SpecNormConfig,
    pub on_failure: FailurePolicy,
    /// Samples per ADAM step. 1 reproduces per-sample updates; larger
    /// batches evaluate gradients in parallel and average them in sample order.
    pub batch: usize,
    /// Backward tolerance; `None` uses the forward tolerance.
    pub backward_tol: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rho: 0.5,
            seed: 0,
            loss: LossKind::NormalizedL2,
            mode: Mode::SelfSupervised,
            norm_every: 1,
            norm: SpecNormConfig::default(),
            on_failure: FailurePolicy::Skip,
            batch: 1,
            backward_tol: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("split ratio {} outside (0, 1]", self.rho));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("adam betas {} / {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("adam eps {}", self.eps));
        }
        if self.batch == 0 {
            return bad("batch size 0".into());
        }
        self.norm.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub sample: usize,
    pub loss: f64,
    pub fwd_iters: usize,
    pub bwd_iters: usize,
    pub grad_norm: f64,
}

impl StepLog {
    pub const HEADER: &'static str = "epoch\tsample\tloss\tfwd_iters\tbwd_iters\tgrad_norm";
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.17e}\t{}\t{}\t{:.17e}",
            self.epoch, self.sample, self.loss, self.fwd_iters, self.bwd_iters, self.grad_norm
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: NetworkParams,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub history: Vec<StepLog>,
    /// `(epoch, sample)` of skipped samples.
    pub skipped: Vec<(usize, usize)>,
}

impl TrainState {
    pub fn new(params: NetworkParams) -> Self {
        let n = params.num_params();
        Self { params, m: vec![0.0; n], v: vec![0.0; n], t: 0, history: Vec::new(), skipped: Vec::new() }
    }
}

/// Bias-corrected ADAM step, followed by Lipschitz re-normalization when
/// the cadence in `cfg` calls for it (`dims` is the grid size the budget
/// is enforced on).
pub fn adam_update(state: &mut TrainState, grad: &[f64], cfg: &TrainConfig, dims: Dims) -> Result<()> {
    if grad.len() != state.m.len() {
        return Err(Error::DimMismatch(format!("{} gradient entries for {} parameters", grad.len(), state.m.len())));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("entry {i} is {} at step {}", grad[i], state.t + 1)));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut flat = state.params.to_flat();
    for (((p, m), v), g) in flat.iter_mut().zip(&mut state.m).zip(&mut state.v).zip(grad) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
    state.params.set_flat(&flat)?;
    if cfg.norm_every > 0 && state.t.is_multiple_of(cfg.norm_every as u64) {
        state.params = lipschitz_normalize(&state.params, dims, &cfg.norm)?.0;
    }
    Ok(())
}

fn grad_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Training loop: for each epoch and each (batch of)
/// sample(s), solve the fixed point, evaluate the loss, backpropagate
/// implicitly and take one ADAM step. `log` receives one entry per sample.
pub fn train(
    samples: &[SamplePair],
    cfg: &TrainConfig,
    fp: &FixedPointConfig,
    p0: NetworkParams,
    mut log: impl FnMut(&StepLog),
) -> Result<TrainState> {
    cfg.validate()?;
    fp.validate()?;
    let mut state = TrainState::new(p0);
    if cfg.epochs == 0 {
        return Ok(state);
    }
    if samples.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let problems = samples.iter().map(|s| s.problem(cfg.mode, cfg.loss)).collect::<Result<Vec<_>>>()?;
    let dims = samples[0].y_omega.dims();
    let bwd = FixedPointConfig { tol: cfg.backward_tol.unwrap_or(fp.tol), ..*fp };

    for epoch in 0..cfg.epochs {
        for start in (0..problems.len()).step_by(cfg.batch) {
            let idx: Vec<usize> = (start..(start + cfg.batch).min(problems.len())).collect();
            let params = &state.params;
            let results: Vec<Result<LossGradient>> = if idx.len() == 1 {
                vec![loss_and_gradient(&problems[idx[0]], params, fp, &bwd)]
            } else {
                idx.par_iter().map(|&i| loss_and_gradient(&problems[i], params, fp, &bwd)).collect()
            };
            let mut sum = vec![0.0; state.m.len()];
            let mut used = 0usize;
            for (&i, r) in idx.iter().zip(results) {
                match r {
                    Ok(lg) => {
                        let entry = StepLog {
                            epoch,
                            sample: i,
                            loss: lg.loss,
                            fwd_iters: lg.forward.iters,
                            bwd_iters: lg.adjoint_iters,
                            grad_norm: grad_norm(&lg.grad),
                        };
                        debug!("{entry}");
                        log(&entry);
                        state.history.push(entry);
                        sum.iter_mut().zip(&lg.grad).for_each(|(a, b)| *a += b);
                        used += 1;
                    }
                    Err(Error::NotConverged(msg)) if cfg.on_failure == FailurePolicy::Skip => {
                        warn!("skipping sample {i} in epoch {epoch}: {msg}");
                        state.skipped.push((epoch, i));
                    }
                    Err(e) => return Err(e),
                }
            }
            if used > 0 {
                sum.iter_mut().for_each(|g| *g /= used as f64);
                adam_update(&mut state, &sum, cfg, dims)?;
            }
        }
    }
    Ok(state)
}

/// Output of [`reconstruct`].
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub report: FixedPointReport,
    /// Image-domain metrics of the RSS images, when a reference was given.
    pub metrics: Option<MetricsTriple>,
}

/// Inference: the fixed point of `P_Ω ∘ G` from zero-filled `y`.
pub fn reconstruct(
    y: &Grid,
    mask: &SamplingMask,
    p: &NetworkParams,
    fp: &FixedPointConfig,
    reference: Option<&Grid>,
) -> Result<Reconstruction> {
    let x0 = zero_filled(y, mask)?;
    let report = solve_fixed_point(x0, |x| pgd_map(x, p, mask, y), fp)?;
    let metrics = match reference {
        Some(r) => Some(image_metrics(r, &report.solution)?),
        None => None,
    };
    Ok(Reconstruction { report, metrics })
}

/// NMSE/PSNR/SSIM of the coil-combined images of two k-space grids.
pub fn image_metrics(reference: &Grid, rec: &Grid) -> Result<MetricsTriple> {
    if reference.dims() != rec.dims() {
        return Err(Error::DimMismatch(format!("reference {} vs reconstruction {}", reference.dims(), rec.dims())));
    }
    let a = metrics::coil_combine_rss(&fft::inverse(reference));
    let b = metrics::coil_combine_rss(&fft::inverse(rec));
    metrics::metrics(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Rect;
    use num_complex::Complex64;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn loss_example() {
        let d = Dims::new(2, 1, 1).unwrap();
        let t = Grid::from_vec(d, vec![c(2.0), c(0.0)]).unwrap();
        let x = Grid::from_vec(d, vec![c(2.0), c(1.0)]).unwrap();
        let (l, g) = loss_eval(&x, &t, None, LossKind::NormalizedL2).unwrap();
        assert_eq!(l, 0.25);
        assert_eq!(g.as_slice(), &[c(0.0), c(0.5)]);
        let (l0, g0) = loss_eval(&t, &t, None, LossKind::NormalizedL2).unwrap();
        assert_eq!((l0, g0.norm()), (0.0, 0.0));
        assert!(matches!(loss_eval(&x, &Grid::zeros(d), None, LossKind::NormalizedL2), Err(Error::ZeroNormReference)));
    }

    #[test]
    fn mixed_loss_cotangent_matches_finite_differences() {
        let d = Dims::new(3, 2, 2).unwrap();
        let t = rng::seeded_grid(d, 1);
        let x = rng::seeded_grid(d, 2);
        let dir = rng::seeded_grid(d, 3);
        let kind = LossKind::Mixed { l2_weight: 0.3 };
        let (_, g) = loss_eval(&x, &t, None, kind).unwrap();
        let h = 1e-6;
        let mut xp = x.clone();
        xp.axpy(h, &dir);
        let mut xm = x.clone();
        xm.axpy(-h, &dir);
        let fd = (loss_eval(&xp, &t, None, kind).unwrap().0 - loss_eval(&xm, &t, None, kind).unwrap().0) / (2.0 * h);
        assert!((fd - g.real_dot(&dir)).abs() <= 1e-7 * fd.abs().max(1.0));
    }

    #[test]
    fn split_counts_and_subsets() {
        let mut keep = vec![false; 20];
        (0..10).for_each(|i| keep[2 * i] = true);
        let omega = SamplingMask::new(20, 1, keep, None, 2.0, MaskRole::Omega).unwrap();
        let (l, g) = split_mask(&omega, 0.5, 7).unwrap();
        assert_eq!((l.count(), g.count()), (5, 5));
        assert!(l.is_subset_of(&omega) && g.is_subset_of(&omega));
        assert!(l.keep().iter().zip(g.keep()).all(|(a, b)| !(*a && *b)));
        let (l2, _) = split_mask(&omega, 0.5, 7).unwrap();
        assert_eq!(l, l2);
        let (all, none) = split_mask(&omega, 1.0, 7).unwrap();
        assert_eq!(all.keep(), omega.keep());
        assert_eq!(none.count(), 0);
        assert!(split_mask(&omega, 0.0, 1).is_err());
    }

    #[test]
    fn split_keeps_calibration_region() {
        let acs = Rect::centered(32, 1, 6, 1).unwrap();
        let keep: Vec<bool> = (0..32).map(|i| acs.contains(i, 0) || i % 4 == 0).collect();
        let omega = SamplingMask::new(32, 1, keep, Some(acs), 4.0, MaskRole::Omega).unwrap();
        let free = omega.count() - 6;
        let (l, _) = split_mask(&omega, 0.5, 3).unwrap();
        assert_eq!(l.count(), 6 + (0.5 * free as f64).round() as usize);
        assert!((acs.row0..acs.row0 + 6).all(|r| l.is_kept(r, 0)));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let w = crate::hankel::Window::new(1, 1).unwrap();
        let bank = crate::hankel::FilterBank::delta(w, 1, 0, c(0.1)).unwrap();
        let p = NetworkParams::sspgd(bank, 1.0);
        let cfg = TrainConfig { norm_every: 0, ..TrainConfig::default() };
        let dims = Dims::new(4, 1, 1).unwrap();
        let mut s = TrainState::new(p.clone());
        adam_update(&mut s, &[0.0, 0.0], &cfg, dims).unwrap();
        assert_eq!((s.t, &s.params), (1, &p));
        let mut s = TrainState::new(p.clone());
        adam_update(&mut s, &[1.0, 0.0], &cfg, dims).unwrap();
        let delta = s.params.to_flat()[0] - 0.1;
        assert!((delta + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
        assert!(adam_update(&mut s, &[f64::NAN, 0.0], &cfg, dims).is_err());
    }
}

//! Residual steps `G(x)` of the three unrolled architectures and their
//! exact vector-Jacobian products.
//!
//! * [`NetworkParams::Sspgd`]: `G(x) = x − η·Conv_s̄^H σ(Conv_s̄ x)` with
//!   `σ` either ReLU on the real and imaginary parts or the identity (the
//!   plain projected-gradient step of the Frobenius objective).
//! * [`NetworkParams::Ksspgd`]: `G(x) = x − η·N_K(x)` with a k-space
//!   convolution stack on `2·Nc` real channels.
//! * [`NetworkParams::Hsspgd`]: `G(x) = x − η1·N_K(x) − η2·N_I(x)` where
//!   `N_I(x) = FFT(T_I(IFFT(x)))` applies an image-domain stack.
//!
//! For the generalized variants [`ResidualForm::Averaged`] substitutes
//! `N(x) = x − T(x)`, which makes `G` an averaged map
//! `(1 − η)x + η·T(x)` and therefore contractive whenever `T` is.

use num_complex::Complex64;

use crate::conv::{ConvStack, Tensor};
use crate::error::{Error, Result};
use crate::fft;
use crate::fixed_point::ResidualMap;
use crate::grid::{Dims, Grid};
use crate::hankel::{self, FilterBank, SpecNormConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualForm {
    /// `N(x) = T(x)`.
    Direct,
    /// `N(x) = x − T(x)`.
    Averaged,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetworkParams {
    Sspgd {
        filters: FilterBank,
        eta: f64,
        activation: Activation,
    },
    Ksspgd {
        kspace: ConvStack,
        eta: f64,
        form: ResidualForm,
    },
    Hsspgd {
        kspace: ConvStack,
        image: ConvStack,
        eta1: f64,
        eta2: f64,
        form: ResidualForm,
    },
}

/// Gradient of `⟨seed, G(x)⟩` (real inner product).
#[derive(Debug, Clone)]
pub struct Cotangent {
    pub wrt_input: Grid,
    /// Ordered like [`NetworkParams::to_flat`].
    pub wrt_params: Vec<f64>,
}

/// Architecture constants of the generalized networks.
pub const DEFAULT_DEPTH: usize = 5;
pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_HIDDEN: usize = 64;

impl NetworkParams {
    /// SSPGD with ReLU activation.
    pub fn sspgd(filters: FilterBank, eta: f64) -> Self {
        NetworkParams::Sspgd { filters, eta, activation: Activation::Relu }
    }

    /// SSPGD with identity activation: the projected-gradient step of
    /// `min ‖Conv_s̄(x)‖²`.
    pub fn sspgd_linear(filters: FilterBank, eta: f64) -> Self {
        NetworkParams::Sspgd { filters, eta, activation: Activation::Identity }
    }

    /// Channel widths `[2Nc, hidden, …, hidden, 2Nc]` for `depth` layers.
    pub fn stack_channels(coils: usize, hidden: usize, depth: usize) -> Vec<usize> {
        let mut ch = vec![2 * coils];
        ch.extend(std::iter::repeat_n(hidden, depth.saturating_sub(1)));
        ch.push(2 * coils);
        ch
    }

    pub fn ksspgd_random(coils: usize, hidden: usize, eta: f64, form: ResidualForm, seed: u64) -> Result<Self> {
        let ch = Self::stack_channels(coils, hidden, DEFAULT_DEPTH);
        Ok(NetworkParams::Ksspgd { kspace: ConvStack::random(&ch, DEFAULT_KERNEL, seed)?, eta, form })
    }

    pub fn hsspgd_random(
        coils: usize,
        hidden: usize,
        eta1: f64,
        eta2: f64,
        form: ResidualForm,
        seed: u64,
    ) -> Result<Self> {
        let ch = Self::stack_channels(coils, hidden, DEFAULT_DEPTH);
        Ok(NetworkParams::Hsspgd {
            kspace: ConvStack::random(&ch, DEFAULT_KERNEL, seed)?,
            image: ConvStack::random(&ch, DEFAULT_KERNEL, seed.wrapping_add(1))?,
            eta1,
            eta2,
            form,
        })
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            NetworkParams::Sspgd { .. } => "sspgd",
            NetworkParams::Ksspgd { .. } => "ksspgd",
            NetworkParams::Hsspgd { .. } => "hsspgd",
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            NetworkParams::Sspgd { filters, .. } => 2 * filters.coeffs().len(),
            NetworkParams::Ksspgd { kspace, .. } => kspace.num_params(),
            NetworkParams::Hsspgd { kspace, image, .. } => kspace.num_params() + image.num_params(),
        }
    }

    /// Trainable parameters as one real vector. Complex filter taps are
    /// stored as `(re, im)` pairs; step sizes are not trainable.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        match self {
            NetworkParams::Sspgd { filters, .. } => {
                out.extend(filters.coeffs().iter().flat_map(|z| [z.re, z.im]));
            }
            NetworkParams::Ksspgd { kspace, .. } => kspace.write_flat(&mut out),
            NetworkParams::Hsspgd { kspace, image, .. } => {
                kspace.write_flat(&mut out);
                image.write_flat(&mut out);
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimMismatch(format!(
                "{} flat parameters for a network with {}",
                flat.len(),
                self.num_params()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter update is not finite".into()));
        }
        match self {
            NetworkParams::Sspgd { filters, .. } => {
                for (z, p) in filters.coeffs_mut().iter_mut().zip(flat.chunks_exact(2)) {
                    *z = Complex64::new(p[0], p[1]);
                }
            }
            NetworkParams::Ksspgd { kspace, .. } => {
                kspace.read_flat(flat)?;
            }
            NetworkParams::Hsspgd { kspace, image, .. } => {
                let used = kspace.read_flat(flat)?;
                image.read_flat(&flat[used..])?;
            }
        }
        Ok(())
    }

    fn check_coils(&self, dims: Dims) -> Result<()> {
        let expected = match self {
            NetworkParams::Sspgd { filters, .. } => filters.coils(),
            NetworkParams::Ksspgd { kspace, .. } | NetworkParams::Hsspgd { kspace, .. } => kspace.in_channels() / 2,
        };
        if dims.channels != expected {
            return Err(Error::DimMismatch(format!(
                "grid has {} coils, {} network expects {expected}",
                dims.channels,
                self.variant_name()
            )));
        }
        Ok(())
    }

    /// `G(x)` for any variant.
    pub fn residual(&self, x: &Grid) -> Result<Grid> {
        match self {
            NetworkParams::Sspgd { .. } => residual_sspgd(x, self),
            _ => residual_generalized(x, self),
        }
    }

    /// Exact reverse-mode product `(J_G^T seed, (∂G/∂p)^T seed)`.
    pub fn vjp(&self, x: &Grid, seed: &Grid) -> Result<Cotangent> {
        residual_vjp(x, self, seed)
    }

    /// Input VJP only; skips the parameter gradient.
    pub fn vjp_input(&self, x: &Grid, seed: &Grid) -> Result<Grid> {
        match self {
            NetworkParams::Sspgd { filters, eta, activation } => {
                sspgd_input_vjp(x, filters, *eta, *activation, seed)
            }
            _ => Ok(residual_vjp(x, self, seed)?.wrt_input),
        }
    }

    /// Values at which the activations switch, i.e. every ReLU input
    /// evaluated at `x`. Empty for activation-free networks.
    pub fn relu_inputs(&self, x: &Grid) -> Result<Vec<f64>> {
        self.check_coils(x.dims())?;
        match self {
            NetworkParams::Sspgd { filters, activation, .. } => match activation {
                Activation::Identity => Ok(Vec::new()),
                Activation::Relu => {
                    let z = hankel::conv_forward(x, filters)?;
                    Ok(z.as_slice().iter().flat_map(|v| [v.re, v.im]).collect())
                }
            },
            NetworkParams::Ksspgd { kspace, .. } => kspace.pre_activations(&Tensor::from_grid(x)),
            NetworkParams::Hsspgd { kspace, image, .. } => {
                let mut v = kspace.pre_activations(&Tensor::from_grid(x))?;
                v.extend(image.pre_activations(&Tensor::from_grid(&fft::inverse(x)))?);
                Ok(v)
            }
        }
    }

    /// ReLU on/off pattern at `x`.
    pub fn activation_pattern(&self, x: &Grid) -> Result<Vec<bool>> {
        Ok(self.relu_inputs(x)?.into_iter().map(|v| v > 0.0).collect())
    }
}

impl ResidualMap for NetworkParams {
    fn residual(&self, x: &Grid) -> Result<Grid> {
        NetworkParams::residual(self, x)
    }
}

#[inline]
fn relu_c(z: Complex64) -> Complex64 {
    Complex64::new(z.re.max(0.0), z.im.max(0.0))
}

/// Keeps the parts of `q` where the matching part of `z` is positive.
#[inline]
fn relu_mask(z: Complex64, q: Complex64) -> Complex64 {
    Complex64::new(if z.re > 0.0 { q.re } else { 0.0 }, if z.im > 0.0 { q.im } else { 0.0 })
}

/// `G(x) = x − η·Conv_s̄^H σ(Conv_s̄ x)`.
pub fn residual_sspgd(x: &Grid, p: &NetworkParams) -> Result<Grid> {
    let NetworkParams::Sspgd { filters, eta, activation } = p else {
        return Err(Error::VariantMismatch { expected: "sspgd", got: p.variant_name() });
    };
    p.check_coils(x.dims())?;
    let mut z = hankel::conv_forward(x, filters)?;
    if *activation == Activation::Relu {
        z.as_mut_slice().iter_mut().for_each(|v| *v = relu_c(*v));
    }
    let back = hankel::conv_adjoint(&z, filters)?;
    let mut out = x.clone();
    out.axpy(-eta, &back);
    Ok(out)
}

fn stack_apply(stack: &ConvStack, x: &Grid) -> Result<Grid> {
    stack.forward(&Tensor::from_grid(x))?.to_grid()
}

/// `N(x)` for a k-space stack.
fn n_kspace(stack: &ConvStack, form: ResidualForm, x: &Grid) -> Result<Grid> {
    let t = stack_apply(stack, x)?;
    Ok(match form {
        ResidualForm::Direct => t,
        ResidualForm::Averaged => x.sub(&t),
    })
}

/// `N_I(x) = FFT(T(IFFT(x)))`, or `x − FFT(T(IFFT(x)))` in averaged form.
fn n_image(stack: &ConvStack, form: ResidualForm, x: &Grid) -> Result<Grid> {
    let t = fft::forward(&stack_apply(stack, &fft::inverse(x))?);
    Ok(match form {
        ResidualForm::Direct => t,
        ResidualForm::Averaged => x.sub(&t),
    })
}

/// `G(x)` for the generalized variants.
pub fn residual_generalized(x: &Grid, p: &NetworkParams) -> Result<Grid> {
    p.check_coils(x.dims())?;
    match p {
        NetworkParams::Ksspgd { kspace, eta, form } => {
            let mut out = x.clone();
            out.axpy(-eta, &n_kspace(kspace, *form, x)?);
            Ok(out)
        }
        NetworkParams::Hsspgd { kspace, image, eta1, eta2, form } => {
            let mut out = x.clone();
            out.axpy(-eta1, &n_kspace(kspace, *form, x)?);
            if *eta2 != 0.0 {
                out.axpy(-eta2, &n_image(image, *form, x)?);
            }
            Ok(out)
        }
        NetworkParams::Sspgd { .. } => Err(Error::VariantMismatch { expected: "ksspgd|hsspgd", got: "sspgd" }),
    }
}

fn sspgd_input_vjp(x: &Grid, filters: &FilterBank, eta: f64, act: Activation, seed: &Grid) -> Result<Grid> {
    let mut q = hankel::conv_forward(seed, filters)?;
    if act == Activation::Relu {
        let z = hankel::conv_forward(x, filters)?;
        q.as_mut_slice().iter_mut().zip(z.as_slice()).for_each(|(qv, zv)| *qv = relu_mask(*zv, *qv));
    }
    let mut out = seed.clone();
    out.axpy(-eta, &hankel::conv_adjoint(&q, filters)?);
    Ok(out)
}

/// `K[j,c,a,b] = Σ_n conj(w_j[n]) · y_c[n + (a, b)]`, the correlation that
/// gives the derivative of `⟨w, Conv_s̄ y⟩` w.r.t. `s̄`.
fn filter_correlation(w: &Grid, y: &Grid, filters: &FilterBank, acc: &mut [Complex64]) {
    let d = y.dims();
    let win = filters.window();
    let (nc, r) = (filters.coils(), filters.count());
    let ws = w.as_slice();
    let ys = y.as_slice();
    for n1 in 0..d.rows {
        for n2 in 0..d.cols {
            let wv = &ws[(n1 * d.cols + n2) * r..][..r];
            for a in 0..win.d1 {
                let row = (n1 + a) % d.rows;
                for b in 0..win.d2 {
                    let src = (row * d.cols + (n2 + b) % d.cols) * nc;
                    for c in 0..nc {
                        let yv = ys[src + c];
                        for (j, wj) in wv.iter().enumerate() {
                            // reversed tap (a, b) of filter j is stored tap (d1-1-a, d2-1-b)
                            let i = filters.offset(j, c, win.d1 - 1 - a, win.d2 - 1 - b);
                            acc[i] += wj.conj() * yv;
                        }
                    }
                }
            }
        }
    }
}

/// Exact VJP of the residual of any variant.
pub fn residual_vjp(x: &Grid, p: &NetworkParams, seed: &Grid) -> Result<Cotangent> {
    p.check_coils(x.dims())?;
    if seed.dims() != x.dims() {
        return Err(Error::DimMismatch(format!("seed {} vs input {}", seed.dims(), x.dims())));
    }
    match p {
        NetworkParams::Sspgd { filters, eta, activation } => {
            let mut u = hankel::conv_forward(x, filters)?;
            let mut q = hankel::conv_forward(seed, filters)?;
            if *activation == Activation::Relu {
                for (qv, zv) in q.as_mut_slice().iter_mut().zip(u.as_slice()) {
                    *qv = relu_mask(*zv, *qv);
                }
                u.as_mut_slice().iter_mut().for_each(|v| *v = relu_c(*v));
            }
            // ⟨seed, G⟩ = Re⟨seed, x⟩ − η·Re⟨Conv seed, σ(Conv x)⟩
            let mut k = vec![Complex64::new(0.0, 0.0); filters.coeffs().len()];
            filter_correlation(&u, seed, filters, &mut k);
            filter_correlation(&q, x, filters, &mut k);
            let wrt_params = k.iter().flat_map(|kv| [-eta * kv.re, eta * kv.im]).collect();

            let mut wrt_input = seed.clone();
            wrt_input.axpy(-eta, &hankel::conv_adjoint(&q, filters)?);
            Ok(Cotangent { wrt_input, wrt_params })
        }
        NetworkParams::Ksspgd { kspace, eta, form } => {
            let mut grad = vec![0.0; kspace.num_params()];
            let t_in = stack_vjp(kspace, &Tensor::from_grid(x), &Tensor::from_grid(seed), &mut grad)?;
            grad.iter_mut().for_each(|g| *g *= step_sign(*form) * eta);
            Ok(Cotangent { wrt_input: combine_input(seed, &[(*eta, *form, t_in)]), wrt_params: grad })
        }
        NetworkParams::Hsspgd { kspace, image, eta1, eta2, form } => {
            let mut gk = vec![0.0; kspace.num_params()];
            let tk = stack_vjp(kspace, &Tensor::from_grid(x), &Tensor::from_grid(seed), &mut gk)?;
            gk.iter_mut().for_each(|g| *g *= step_sign(*form) * eta1);

            let mut gi = vec![0.0; image.num_params()];
            let mut terms = vec![(*eta1, *form, tk)];
            if *eta2 != 0.0 {
                // adjoint of x ↦ FFT(T(IFFT x)) is v ↦ FFT(J_T^T IFFT v)
                let img = Tensor::from_grid(&fft::inverse(x));
                let s_img = Tensor::from_grid(&fft::inverse(seed));
                let ti = stack_vjp(image, &img, &s_img, &mut gi)?;
                gi.iter_mut().for_each(|g| *g *= step_sign(*form) * eta2);
                terms.push((*eta2, *form, fft::forward(&ti)));
            }
            let mut wrt_params = gk;
            wrt_params.extend(gi);
            Ok(Cotangent { wrt_input: combine_input(seed, &terms), wrt_params })
        }
    }
}

/// Sign of `T` inside `G`: `−η·T` (direct) or `+η·T` (averaged).
fn step_sign(form: ResidualForm) -> f64 {
    match form {
        ResidualForm::Direct => -1.0,
        ResidualForm::Averaged => 1.0,
    }
}

/// `J_T^T seed` as a complex grid; parameter gradient of `⟨seed, T⟩` added to `grad`.
fn stack_vjp(stack: &ConvStack, x: &Tensor, seed: &Tensor, grad: &mut [f64]) -> Result<Grid> {
    let (_, tape) = stack.forward_taped(x, true)?;
    stack.backward(&tape, seed, grad)?.to_grid()
}

/// `seed − Σ η·N'` where `N' = J_T^T seed` (direct) or `seed − J_T^T seed` (averaged).
fn combine_input(seed: &Grid, terms: &[(f64, ResidualForm, Grid)]) -> Grid {
    let mut out = seed.clone();
    for (eta, form, t) in terms {
        match form {
            ResidualForm::Direct => out.axpy(-eta, t),
            ResidualForm::Averaged => {
                out.axpy(-eta, seed);
                out.axpy(*eta, t);
            }
        }
    }
    out
}

/// Outcome of [`lipschitz_normalize`].
#[derive(Debug, Clone)]
pub struct LipschitzReport {
    /// Estimated norm of each normalized operator before rescaling: the
    /// filter-bank `√λ_max` for SSPGD, otherwise one entry per conv layer.
    pub norms_before: Vec<f64>,
    pub scales: Vec<f64>,
    /// Per-layer budget `ℓ`.
    pub budget: f64,
}

/// Rescales layers so the Lipschitz budget `Π ℓ_i ≤ 1 − ε` holds on grids
/// of `dims`: SSPGD delegates to [`hankel::spectral_normalize`], the conv
/// stacks get an equal per-layer budget `ℓ = (1 − ε)^{1/L}`.
pub fn lipschitz_normalize(p: &NetworkParams, dims: Dims, cfg: &SpecNormConfig) -> Result<(NetworkParams, LipschitzReport)> {
    cfg.validate()?;
    let mut out = p.clone();
    match &mut out {
        NetworkParams::Sspgd { filters, .. } => {
            let res = hankel::spectral_normalize(filters, dims, cfg)?;
            *filters = res.filters;
            Ok((
                out,
                LipschitzReport { norms_before: vec![res.lambda_before.sqrt()], scales: vec![res.scale], budget: cfg.budget() },
            ))
        }
        NetworkParams::Ksspgd { kspace, .. } => {
            let (norms, scales, budget) = normalize_stack(kspace, dims, cfg)?;
            Ok((out, LipschitzReport { norms_before: norms, scales, budget }))
        }
        NetworkParams::Hsspgd { kspace, image, .. } => {
            let (mut norms, mut scales, budget) = normalize_stack(kspace, dims, cfg)?;
            let (n2, s2, _) = normalize_stack(image, dims, cfg)?;
            norms.extend(n2);
            scales.extend(s2);
            Ok((out, LipschitzReport { norms_before: norms, scales, budget }))
        }
    }
}

fn normalize_stack(stack: &mut ConvStack, dims: Dims, cfg: &SpecNormConfig) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let budget = cfg.budget().powf(1.0 / stack.layers.len() as f64);
    let mut norms = Vec::new();
    let mut scales = Vec::new();
    for layer in &mut stack.layers {
        let n = layer.spectral_norm(dims.rows, dims.cols);
        let s = if n > budget { budget / n } else { 1.0 };
        if s != 1.0 {
            layer.scale_weights(s);
        }
        norms.push(n);
        scales.push(s);
    }
    Ok((norms, scales, budget))
}

/// Empirical Lipschitz constant of `G`: the largest
/// `‖G(a) − G(b)‖ / ‖a − b‖` over `pairs` seeded random pairs.
pub fn empirical_lipschitz(p: &NetworkParams, dims: Dims, pairs: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..pairs as u64 {
        let a = crate::rng::seeded_grid(dims, seed.wrapping_mul(7919).wrapping_add(2 * i));
        let b = crate::rng::seeded_grid(dims, seed.wrapping_mul(7919).wrapping_add(2 * i + 1));
        let num = p.residual(&a)?.distance(&p.residual(&b)?);
        worst = worst.max(num / a.distance(&b));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hankel::Window;
    use crate::rng::{self, seeded_grid};

    fn random_bank(w: Window, coils: usize, r: usize, seed: u64) -> FilterBank {
        let mut g = rng::rng(seed);
        let coeffs = (0..r * coils * w.taps()).map(|_| rng::complex_normal(&mut g)).collect();
        FilterBank::new(w, coils, r, coeffs).unwrap()
    }

    fn objective(p: &NetworkParams, x: &Grid, seed: &Grid) -> f64 {
        seed.real_dot(&p.residual(x).unwrap())
    }

    /// Central-difference check of every parameter in `coords`, skipping
    /// coordinates where any ReLU input is within `kink` of zero.
    fn fd_check(p: &NetworkParams, x: &Grid, seed: &Grid, coords: &[usize], h: f64, tol: f64) {
        let cot = p.vjp(x, seed).unwrap();
        let flat = p.to_flat();
        let margin = p.relu_inputs(x).unwrap().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        assert!(margin > 1e-7, "test point too close to a kink: {margin}");
        for &i in coords {
            let mut q = p.clone();
            let mut f = flat.clone();
            f[i] += h;
            q.set_flat(&f).unwrap();
            let up = objective(&q, x, seed);
            f[i] -= 2.0 * h;
            q.set_flat(&f).unwrap();
            let dn = objective(&q, x, seed);
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - cot.wrt_params[i]).abs() / fd.abs().max(cot.wrt_params[i].abs()).max(1e-8);
            assert!(err <= tol, "param {i}: fd {fd} vs vjp {} (rel {err})", cot.wrt_params[i]);
        }
    }

    #[test]
    fn sspgd_zero_input_is_fixed() {
        let p = NetworkParams::sspgd(random_bank(Window::new(2, 2).unwrap(), 2, 3, 1), 0.7);
        let z = Grid::zeros(Dims::new(5, 5, 2).unwrap());
        assert_eq!(p.residual(&z).unwrap().norm(), 0.0);
    }

    #[test]
    fn sspgd_delta_filter_halves_positive_input() {
        let w = Window::new(1, 1).unwrap();
        let p = NetworkParams::sspgd(FilterBank::delta(w, 1, 0, Complex64::new(1.0, 0.0)).unwrap(), 0.5);
        let x = Grid::from_fn(Dims::new(3, 3, 1).unwrap(), |r, c, _| Complex64::new((r + 2 * c) as f64 + 0.5, 0.0)).unwrap();
        let g = p.residual(&x).unwrap();
        assert!(g.distance(&x.scaled(0.5)) <= 1e-15);
    }

    #[test]
    fn zero_step_is_identity() {
        let x = seeded_grid(Dims::new(4, 4, 2).unwrap(), 3);
        let p = NetworkParams::sspgd(random_bank(Window::new(2, 2).unwrap(), 2, 2, 2), 0.0);
        assert!(p.residual(&x).unwrap().bitwise_eq(&x));
        let h = NetworkParams::hsspgd_random(2, 4, 0.0, 0.0, ResidualForm::Direct, 5).unwrap();
        assert!(h.residual(&x).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn zero_weights_give_identity_residual() {
        let ch = NetworkParams::stack_channels(2, 4, 5);
        let p = NetworkParams::Ksspgd { kspace: ConvStack::zeros(&ch, 3).unwrap(), eta: 1.0, form: ResidualForm::Direct };
        let x = seeded_grid(Dims::new(4, 4, 2).unwrap(), 8);
        assert!(p.residual(&x).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn hybrid_without_image_branch_equals_kspace_net() {
        let x = seeded_grid(Dims::new(6, 5, 2).unwrap(), 4);
        let NetworkParams::Hsspgd { kspace, .. } = NetworkParams::hsspgd_random(2, 6, 0.3, 0.0, ResidualForm::Direct, 9).unwrap() else {
            unreachable!()
        };
        let h = NetworkParams::Hsspgd {
            kspace: kspace.clone(),
            image: ConvStack::random(&NetworkParams::stack_channels(2, 6, 5), 3, 99).unwrap(),
            eta1: 0.3,
            eta2: 0.0,
            form: ResidualForm::Direct,
        };
        let k = NetworkParams::Ksspgd { kspace, eta: 0.3, form: ResidualForm::Direct };
        let a = h.residual(&x).unwrap();
        let b = k.residual(&x).unwrap();
        assert!(a.distance(&b) <= 1e-14 * b.norm());
    }

    #[test]
    fn vjp_with_zero_seed_vanishes() {
        let x = seeded_grid(Dims::new(4, 4, 1).unwrap(), 4);
        let p = NetworkParams::sspgd(random_bank(Window::new(2, 2).unwrap(), 1, 2, 3), 0.5);
        let cot = p.vjp(&x, &Grid::zeros(x.dims())).unwrap();
        assert_eq!(cot.wrt_input.norm(), 0.0);
        assert!(cot.wrt_params.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn linear_sspgd_input_vjp_is_self_adjoint_composite() {
        let x = seeded_grid(Dims::new(6, 6, 2).unwrap(), 4);
        let seed = seeded_grid(x.dims(), 5);
        let s = random_bank(Window::new(3, 2).unwrap(), 2, 3, 6);
        let p = NetworkParams::sspgd_linear(s.clone(), 0.4);
        let cot = p.vjp(&x, &seed).unwrap();
        let mut direct = seed.clone();
        direct.axpy(-0.4, &hankel::normal_operator(&seed, &s).unwrap());
        assert!(cot.wrt_input.distance(&direct) <= 1e-12 * direct.norm());
    }

    #[test]
    fn sspgd_parameter_vjp_matches_finite_differences() {
        let x = seeded_grid(Dims::new(5, 4, 2).unwrap(), 14);
        let seed = seeded_grid(x.dims(), 15);
        for (act, bank_seed) in [(Activation::Identity, 16), (Activation::Relu, 17)] {
            let p = NetworkParams::Sspgd { filters: random_bank(Window::new(2, 2).unwrap(), 2, 2, bank_seed), eta: 0.6, activation: act };
            let all: Vec<usize> = (0..p.num_params()).collect();
            fd_check(&p, &x, &seed, &all, 1e-5, 1e-6);
        }
    }

    #[test]
    fn generalized_parameter_vjp_matches_finite_differences() {
        let x = seeded_grid(Dims::new(4, 4, 1).unwrap(), 24);
        let seed = seeded_grid(x.dims(), 25);
        for form in [ResidualForm::Direct, ResidualForm::Averaged] {
            let mut p = NetworkParams::hsspgd_random(1, 3, 0.7, 0.4, form, 26).unwrap();
            let mut flat = p.to_flat();
            // non-zero biases so hidden ReLUs are exercised away from zero
            flat.iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * ((i % 5) as f64 - 2.0));
            p.set_flat(&flat).unwrap();
            let coords: Vec<usize> = (0..p.num_params()).step_by(5).collect();
            fd_check(&p, &x, &seed, &coords, 1e-5, 1e-6);
        }
    }

    #[test]
    fn generalized_input_vjp_dot_test() {
        let x = seeded_grid(Dims::new(4, 3, 2).unwrap(), 30);
        let seed = seeded_grid(x.dims(), 31);
        let dir = seeded_grid(x.dims(), 32);
        let p = NetworkParams::hsspgd_random(2, 4, 0.5, 0.5, ResidualForm::Direct, 33).unwrap();
        let cot = p.vjp(&x, &seed).unwrap();
        let h = 1e-6;
        let mut xp = x.clone();
        xp.axpy(h, &dir);
        let mut xm = x.clone();
        xm.axpy(-h, &dir);
        let fd = (objective(&p, &xp, &seed) - objective(&p, &xm, &seed)) / (2.0 * h);
        let an = cot.wrt_input.real_dot(&dir);
        assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0), "{fd} vs {an}");
    }

    #[test]
    fn layer_budget_normalization() {
        let dims = Dims::new(6, 6, 1).unwrap();
        // single layer of norm 2 against budget 0.9
        let mut w = vec![0.0; 4 * 9];
        w[4] = 2.0;
        w[3 * 9 + 4] = 2.0;
        let layer = crate::conv::ConvLayer::new(2, 2, 3, w, None).unwrap();
        let p = NetworkParams::Ksspgd { kspace: ConvStack::new(vec![layer]).unwrap(), eta: 1.0, form: ResidualForm::Direct };
        let cfg = SpecNormConfig { tol: 1e-10, power_iters: 200, ..SpecNormConfig::default() };
        let (q, rep) = lipschitz_normalize(&p, dims, &cfg).unwrap();
        assert!((rep.scales[0] - 0.45).abs() < 1e-8);
        let NetworkParams::Ksspgd { kspace, .. } = &q else { unreachable!() };
        let post = kspace.layers[0].spectral_norm(6, 6);
        assert!((post - 0.9).abs() < 1e-8);
        // already within budget: unchanged
        let (again, _) = lipschitz_normalize(&q, dims, &cfg).unwrap();
        assert_eq!(again, q);
    }

    #[test]
    fn five_unit_layers_share_budget() {
        let dims = Dims::new(5, 5, 1).unwrap();
        let layers = (0..5)
            .map(|_| {
                let mut w = vec![0.0; 4 * 9];
                w[4] = 1.0;
                w[3 * 9 + 4] = 1.0;
                crate::conv::ConvLayer::new(2, 2, 3, w, None).unwrap()
            })
            .collect();
        let p = NetworkParams::Ksspgd { kspace: ConvStack::new(layers).unwrap(), eta: 1.0, form: ResidualForm::Direct };
        let cfg = SpecNormConfig { tol: 1e-10, power_iters: 200, ..SpecNormConfig::default() };
        let (_, rep) = lipschitz_normalize(&p, dims, &cfg).unwrap();
        for s in rep.scales {
            assert!((s - 0.9f64.powf(0.2)).abs() < 1e-8);
        }
        assert!((0.9f64.powf(0.2) - 0.9791).abs() < 1e-4);
    }

    #[test]
    fn normalized_sspgd_is_nonexpansive() {
        let dims = Dims::new(8, 8, 2).unwrap();
        for act in [Activation::Relu, Activation::Identity] {
            let p = NetworkParams::Sspgd { filters: random_bank(Window::new(3, 3).unwrap(), 2, 4, 40), eta: 1.0, activation: act };
            let (p, _) = lipschitz_normalize(&p, dims, &SpecNormConfig::default()).unwrap();
            let lip = empirical_lipschitz(&p, dims, 100, 41).unwrap();
            assert!(lip <= 1.0 + 1e-9, "{lip}");
        }
    }

    #[test]
    fn averaged_generalized_net_is_contractive() {
        let dims = Dims::new(6, 6, 1).unwrap();
        let p = NetworkParams::hsspgd_random(1, 8, 0.5, 0.5, ResidualForm::Averaged, 50).unwrap();
        let (p, _) = lipschitz_normalize(&p, dims, &SpecNormConfig::default()).unwrap();
        let lip = empirical_lipschitz(&p, dims, 100, 51).unwrap();
        assert!(lip <= 1.0 + 1e-9, "{lip}");
    }

    #[test]
    fn variant_mismatch_is_reported() {
        let p = NetworkParams::ksspgd_random(1, 4, 1.0, ResidualForm::Direct, 1).unwrap();
        let x = seeded_grid(Dims::new(4, 4, 1).unwrap(), 1);
        assert!(matches!(residual_sspgd(&x, &p), Err(Error::VariantMismatch { .. })));
        let x2 = seeded_grid(Dims::new(4, 4, 2).unwrap(), 1);
        assert!(p.residual(&x2).is_err());
    }
}

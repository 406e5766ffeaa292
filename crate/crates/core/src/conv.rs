//! Real-valued convolution stacks with hand-written backward passes.
//!
//! Tensors are `rows × cols × channels` in the same layout as [`Grid`]
//! (row-major, channel fastest). Convolutions are circular ("same" size,
//! wrap-around borders) with odd square kernels centered on the output
//! pixel. Complex grids enter as `2·Nc` real channels `[re c0, im c0,
//! re c1, im c1, …]`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{memtrack, Dims, Grid};
use crate::rng::{self, Rng};

/// Dense real tensor.
#[derive(PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        memtrack::on_alloc();
        Self { rows, cols, channels, data: vec![0.0; rows * cols * channels] }
    }

    fn from_data(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols * channels);
        memtrack::on_alloc();
        Self { rows, cols, channels, data }
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Channel-doubled real view of a complex grid.
    pub fn from_grid(g: &Grid) -> Self {
        let d = g.dims();
        let data = g.as_slice().iter().flat_map(|z| [z.re, z.im]).collect();
        Self::from_data(d.rows, d.cols, 2 * d.channels, data)
    }

    /// Inverse of [`Tensor::from_grid`]; requires an even channel count.
    pub fn to_grid(&self) -> Result<Grid> {
        if !self.channels.is_multiple_of(2) {
            return Err(Error::DimMismatch(format!("{} real channels cannot form complex coils", self.channels)));
        }
        let dims = Dims::new(self.rows, self.cols, self.channels / 2)?;
        Grid::from_vec(dims, self.data.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::from_data(self.rows, self.cols, self.channels, self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        memtrack::on_drop();
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor({}x{}x{})", self.rows, self.cols, self.channels)
    }
}

/// Circular 2-D convolution layer, weights `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvLayer {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, weight: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::InvalidDims(format!(
                "conv layer {in_ch}->{out_ch} with kernel {kernel} (must be odd)"
            )));
        }
        if weight.len() != out_ch * in_ch * kernel * kernel {
            return Err(Error::DimMismatch(format!("conv weight has {} entries", weight.len())));
        }
        if let Some(b) = &bias {
            if b.len() != out_ch {
                return Err(Error::DimMismatch(format!("bias has {} entries for {out_ch} outputs", b.len())));
            }
        }
        let all_finite = weight.iter().chain(bias.iter().flatten()).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("conv parameter is not finite".into()));
        }
        Ok(Self { in_ch, out_ch, kernel, weight, bias })
    }

    /// He-style Gaussian initialisation; biases start at zero.
    pub fn random(in_ch: usize, out_ch: usize, kernel: usize, with_bias: bool, rng: &mut Rng) -> Self {
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        let weight = (0..out_ch * in_ch * kernel * kernel).map(|_| std * rng::normal(rng)).collect();
        Self { in_ch, out_ch, kernel, weight, bias: with_bias.then(|| vec![0.0; out_ch]) }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Weights as `[tap][out][in]`.
    fn packed(&self) -> Vec<f64> {
        let (k2, ni, no) = (self.taps(), self.in_ch, self.out_ch);
        let mut p = vec![0.0; self.weight.len()];
        for o in 0..no {
            for i in 0..ni {
                for t in 0..k2 {
                    p[(t * no + o) * ni + i] = self.weight[(o * ni + i) * k2 + t];
                }
            }
        }
        p
    }

    /// Source pixel of tap `t` for output pixel `(r, c)`.
    #[inline]
    fn src(&self, r: usize, c: usize, t: usize, rows: usize, cols: usize) -> usize {
        let h = self.kernel / 2;
        let (dy, dx) = (t / self.kernel, t % self.kernel);
        let rr = (r + rows * self.kernel + dy - h) % rows;
        let cc = (c + cols * self.kernel + dx - h) % cols;
        rr * cols + cc
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels != self.in_ch {
            return Err(Error::DimMismatch(format!(
                "layer expects {} channels, got {}",
                self.in_ch, x.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, with_bias: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let (ni, no) = (self.in_ch, self.out_ch);
        let packed = self.packed();
        let mut out = Tensor::zeros(x.rows, x.cols, no);
        for r in 0..x.rows {
            for c in 0..x.cols {
                let p = r * x.cols + c;
                let acc = &mut out.data[p * no..(p + 1) * no];
                if let (true, Some(b)) = (with_bias, &self.bias) {
                    acc.copy_from_slice(b);
                }
                for t in 0..self.taps() {
                    let s = self.src(r, c, t, x.rows, x.cols);
                    let xin = &x.data[s * ni..(s + 1) * ni];
                    let wt = &packed[t * no * ni..(t + 1) * no * ni];
                    for (o, a) in acc.iter_mut().enumerate() {
                        *a += wt[o * ni..(o + 1) * ni].iter().zip(xin).map(|(w, v)| w * v).sum::<f64>();
                    }
                }
            }
        }
        Ok(out)
    }

    /// Transpose of the linear part of [`ConvLayer::forward`].
    pub fn backward_input(&self, dout: &Tensor) -> Result<Tensor> {
        if dout.channels != self.out_ch {
            return Err(Error::DimMismatch("cotangent channels do not match layer outputs".into()));
        }
        let (ni, no) = (self.in_ch, self.out_ch);
        let packed = self.packed();
        let mut din = Tensor::zeros(dout.rows, dout.cols, ni);
        for r in 0..dout.rows {
            for c in 0..dout.cols {
                let p = r * dout.cols + c;
                let g = &dout.data[p * no..(p + 1) * no];
                for t in 0..self.taps() {
                    let s = self.src(r, c, t, dout.rows, dout.cols);
                    let wt = &packed[t * no * ni..(t + 1) * no * ni];
                    let dst = &mut din.data[s * ni..(s + 1) * ni];
                    for (o, gv) in g.iter().enumerate() {
                        if *gv == 0.0 {
                            continue;
                        }
                        for (d, w) in dst.iter_mut().zip(&wt[o * ni..(o + 1) * ni]) {
                            *d += gv * w;
                        }
                    }
                }
            }
        }
        Ok(din)
    }

    /// Accumulates `∂⟨dout, forward(x)⟩` w.r.t. weights then bias into `grad`.
    pub fn backward_params(&self, x: &Tensor, dout: &Tensor, grad: &mut [f64]) {
        let (ni, no, k2) = (self.in_ch, self.out_ch, self.taps());
        let (gw, gb) = grad.split_at_mut(self.weight.len());
        for r in 0..x.rows {
            for c in 0..x.cols {
                let p = r * x.cols + c;
                let g = &dout.data[p * no..(p + 1) * no];
                for t in 0..k2 {
                    let s = self.src(r, c, t, x.rows, x.cols);
                    let xin = &x.data[s * ni..(s + 1) * ni];
                    for (o, gv) in g.iter().enumerate() {
                        if *gv == 0.0 {
                            continue;
                        }
                        for (i, v) in xin.iter().enumerate() {
                            gw[(o * ni + i) * k2 + t] += gv * v;
                        }
                    }
                }
                if self.bias.is_some() {
                    for (o, gv) in g.iter().enumerate() {
                        gb[o] += gv;
                    }
                }
            }
        }
    }

    /// Power-iteration estimate of the operator norm of the linear part
    /// on `rows × cols` grids.
    /// Operator norm of the linear part on a `rows × cols` circular grid.
    ///
    /// The DFT block-diagonalizes a circular convolution, so the norm is the
    /// largest singular value of the `out × in` symbol over all frequencies.
    pub fn spectral_norm(&self, rows: usize, cols: usize) -> f64 {
        let (ni, no, k, h) = (self.in_ch, self.out_ch, self.kernel, self.kernel / 2);
        let tau = 2.0 * std::f64::consts::PI;
        let mut worst: f64 = 0.0;
        for k1 in 0..rows {
            for k2 in 0..cols {
                let phase: Vec<Complex64> = (0..k * k)
                    .map(|t| {
                        let dy = (t / k) as f64 - h as f64;
                        let dx = (t % k) as f64 - h as f64;
                        Complex64::from_polar(1.0, tau * (k1 as f64 * dy / rows as f64 + k2 as f64 * dx / cols as f64))
                    })
                    .collect();
                let sym = DMatrix::from_fn(no, ni, |o, i| {
                    let w = &self.weight[(o * ni + i) * k * k..][..k * k];
                    w.iter().zip(&phase).map(|(wv, p)| p * *wv).sum::<Complex64>()
                });
                worst = worst.max(sym.singular_values().max());
            }
        }
        worst
    }

    pub fn scale_weights(&mut self, alpha: f64) {
        self.weight.iter_mut().for_each(|w| *w *= alpha);
    }
}

/// Convolution layers with ReLU between them and none after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

/// Intermediate values kept for a backward pass.
pub struct StackTape {
    /// Input of every layer; entries after the first are post-ReLU.
    inputs: Vec<Tensor>,
}

impl ConvStack {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidDims("conv stack needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].out_ch != w[1].in_ch {
                return Err(Error::DimMismatch(format!(
                    "layer outputs {} channels but next layer takes {}",
                    w[0].out_ch, w[1].in_ch
                )));
            }
        }
        Ok(Self { layers })
    }

    /// `channels = [c0, c1, …, cL]` gives `L` layers `c_l → c_{l+1}`;
    /// hidden layers carry biases, the output layer does not.
    pub fn random(channels: &[usize], kernel: usize, seed: u64) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::InvalidDims("need at least input and output channel counts".into()));
        }
        let mut g = rng::rng(seed);
        let n = channels.len() - 1;
        let layers = (0..n)
            .map(|l| ConvLayer::random(channels[l], channels[l + 1], kernel, l + 1 < n, &mut g))
            .collect();
        Self::new(layers)
    }

    pub fn zeros(channels: &[usize], kernel: usize) -> Result<Self> {
        let mut s = Self::random(channels, kernel, 0)?;
        for l in &mut s.layers {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
        }
        Ok(s)
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.layers[self.layers.len() - 1].out_ch
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_taped(x, false)?.0)
    }

    /// Forward pass; with `keep_tape` the layer inputs are retained.
    pub fn forward_taped(&self, x: &Tensor, keep_tape: bool) -> Result<(Tensor, StackTape)> {
        let mut tape = StackTape { inputs: Vec::new() };
        let n = self.layers.len();
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = layer.forward(&h, true)?;
            if l + 1 < n {
                a.data.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if keep_tape {
                tape.inputs.push(h);
            }
            h = a;
        }
        Ok((h, tape))
    }

    /// Returns `J^T dout` and adds the parameter gradient into `grad`
    /// (length [`ConvStack::num_params`]). ReLU has derivative 0 at 0.
    pub fn backward(&self, tape: &StackTape, dout: &Tensor, grad: &mut [f64]) -> Result<Tensor> {
        let n = self.layers.len();
        if tape.inputs.len() != n || grad.len() != self.num_params() {
            return Err(Error::DimMismatch("tape or gradient buffer does not match stack".into()));
        }
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.num_params();
                Some(o)
            })
            .collect();
        let mut g = dout.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let x = &tape.inputs[l];
            layer.backward_params(x, &g, &mut grad[offsets[l]..offsets[l] + layer.num_params()]);
            let mut gin = layer.backward_input(&g)?;
            if l > 0 {
                // x is the post-ReLU output of layer l-1
                gin.data.iter_mut().zip(&x.data).for_each(|(gv, h)| {
                    if *h <= 0.0 {
                        *gv = 0.0
                    }
                });
            }
            g = gin;
        }
        Ok(g)
    }

    /// Pre-activation values of the hidden layers (the ReLU inputs).
    pub fn pre_activations(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        let n = self.layers.len();
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = layer.forward(&h, true)?;
            if l + 1 < n {
                out.extend_from_slice(&a.data);
                a.data.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = a;
        }
        Ok(out)
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        }
    }

    /// Reads parameters in [`ConvStack::write_flat`] order; returns entries consumed.
    pub fn read_flat(&mut self, src: &[f64]) -> Result<usize> {
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            let w = src.get(at..at + n).ok_or_else(|| Error::DimMismatch("flat parameters too short".into()))?;
            l.weight.copy_from_slice(w);
            at += n;
            if let Some(b) = &mut l.bias {
                let n = b.len();
                let v = src.get(at..at + n).ok_or_else(|| Error::DimMismatch("flat parameters too short".into()))?;
                b.copy_from_slice(v);
                at += n;
            }
        }
        Ok(at)
    }

    /// Per-layer operator norms on `rows × cols` grids.
    pub fn layer_norms(&self, rows: usize, cols: usize) -> Vec<f64> {
        self.layers.iter().map(|l| l.spectral_norm(rows, cols)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(rows: usize, cols: usize, ch: usize, seed: u64) -> Tensor {
        let mut g = rng::rng(seed);
        Tensor::from_data(rows, cols, ch, (0..rows * cols * ch).map(|_| rng::normal(&mut g)).collect())
    }

    #[test]
    fn conv_transpose_dot_test() {
        let mut g = rng::rng(1);
        let layer = ConvLayer::random(3, 4, 3, true, &mut g);
        let x = random_tensor(5, 6, 3, 2);
        let u = random_tensor(5, 6, 4, 3);
        let lhs = layer.forward(&x, false).unwrap().dot(&u);
        let rhs = x.dot(&layer.backward_input(&u).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut w = vec![0.0; 2 * 2 * 9];
        w[4] = 1.0; // out 0 <- in 0, center tap
        w[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1
        let layer = ConvLayer::new(2, 2, 3, w, None).unwrap();
        let x = random_tensor(4, 3, 2, 7);
        assert_eq!(layer.forward(&x, true).unwrap().data, x.data);
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let stack = ConvStack::random(&[2, 5, 5, 2], 3, 4).unwrap();
        let mut stack = stack;
        for l in &mut stack.layers {
            if let Some(b) = &mut l.bias {
                b.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * i as f64 - 0.1);
            }
        }
        let x = random_tensor(4, 4, 2, 5);
        let seed = random_tensor(4, 4, 2, 6);
        let (_, tape) = stack.forward_taped(&x, true).unwrap();
        let mut grad = vec![0.0; stack.num_params()];
        let gin = stack.backward(&tape, &seed, &mut grad).unwrap();

        let objective = |s: &ConvStack, x: &Tensor| s.forward(x).unwrap().dot(&seed);
        let h = 1e-6;
        let mut flat = Vec::new();
        stack.write_flat(&mut flat);
        for i in (0..flat.len()).step_by(7) {
            let mut p = stack.clone();
            let mut f = flat.clone();
            f[i] += h;
            p.read_flat(&f).unwrap();
            let up = objective(&p, &x);
            f[i] -= 2.0 * h;
            p.read_flat(&f).unwrap();
            let dn = objective(&p, &x);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
        for i in (0..x.data.len()).step_by(3) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = objective(&stack, &xp);
            xp.data[i] -= 2.0 * h;
            let dn = objective(&stack, &xp);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gin.data[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "input {i}");
        }
    }

    #[test]
    fn spectral_norm_of_scaled_identity() {
        let mut w = vec![0.0; 9];
        w[4] = 2.0;
        let layer = ConvLayer::new(1, 1, 3, w, None).unwrap();
        let n = layer.spectral_norm(6, 6);
        assert!((n - 2.0).abs() < 1e-8);
    }

    #[test]
    fn spectral_norm_agrees_with_power_iteration() {
        let layer = ConvLayer::random(3, 2, 3, false, &mut rng::rng(12));
        let (rows, cols) = (5, 4);
        let est = crate::power::largest_eigenvalue(
            rows * cols * 3,
            |v| {
                let y = layer.forward(&Tensor::from_data(rows, cols, 3, v.to_vec()), false).unwrap();
                layer.backward_input(&y).unwrap().data.clone()
            },
            5000,
            1e-13,
        )
        .unwrap();
        let exact = layer.spectral_norm(rows, cols);
        assert!((exact - est.lambda.sqrt()).abs() <= 1e-5 * exact, "{exact} vs {}", est.lambda.sqrt());
    }

    #[test]
    fn complex_real_round_trip() {
        let g = crate::rng::seeded_grid(Dims::new(3, 2, 2).unwrap(), 9);
        let t = Tensor::from_grid(&g);
        assert_eq!(t.channels, 4);
        assert!(t.to_grid().unwrap().bitwise_eq(&g));
    }
}

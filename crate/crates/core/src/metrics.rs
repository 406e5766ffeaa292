//! Coil combination and image-quality metrics.

use crate::error::{Error, Result};
use crate::grid::{Grid, RealGrid};

/// Root-sum-of-squares coil combination: `sqrt(Σ_c |img_c|²)` per pixel.
pub fn coil_combine_rss(img: &Grid) -> RealGrid {
    let d = img.dims();
    let nc = d.channels;
    let data = img
        .as_slice()
        .chunks_exact(nc)
        .map(|px| px.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
        .collect();
    RealGrid { rows: d.rows, cols: d.cols, data }
}

/// NMSE, PSNR (dB) and SSIM of a reconstruction against a reference.
///
/// A perfect reconstruction reports `psnr = f64::INFINITY`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsTriple {
    pub nmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricsTriple {
    pub const PERFECT: MetricsTriple = MetricsTriple { nmse: 0.0, psnr: f64::INFINITY, ssim: 1.0 };
}

/// SSIM window and stabilisation constants.
#[derive(Debug, Clone, Copy)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

pub fn metrics(reference: &RealGrid, rec: &RealGrid) -> Result<MetricsTriple> {
    if reference.rows != rec.rows || reference.cols != rec.cols {
        return Err(Error::DimMismatch(format!(
            "reference {}x{} vs reconstruction {}x{}",
            reference.rows, reference.cols, rec.rows, rec.cols
        )));
    }
    let ref_energy: f64 = reference.data.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::ZeroNormReference);
    }
    let err_energy: f64 = reference.data.iter().zip(&rec.data).map(|(a, b)| (b - a) * (b - a)).sum();
    let nmse = err_energy / ref_energy;

    let peak = dynamic_range(reference);
    let mse = err_energy / reference.data.len() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() };

    let ssim = ssim(reference, rec, peak, &SsimParams::default());
    Ok(MetricsTriple { nmse, psnr, ssim })
}

/// `max(ref)`, falling back to `max|ref|` for references without a positive peak.
fn dynamic_range(reference: &RealGrid) -> f64 {
    let max = reference.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > 0.0 {
        max
    } else {
        reference.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// Mean SSIM with a separable Gaussian window and symmetric boundary
/// extension, so grids smaller than the window are still handled.
pub fn ssim(a: &RealGrid, b: &RealGrid, range: f64, p: &SsimParams) -> f64 {
    let c1 = (p.k1 * range).powi(2);
    let c2 = (p.k2 * range).powi(2);
    let w = gaussian_kernel(p.window, p.sigma);

    let prod = |f: &dyn Fn(f64, f64) -> f64| -> RealGrid {
        RealGrid {
            rows: a.rows,
            cols: a.cols,
            data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
        }
    };
    let mu_a = blur(a, &w);
    let mu_b = blur(b, &w);
    let aa = blur(&prod(&|x, _| x * x), &w);
    let bb = blur(&prod(&|_, y| y * y), &w);
    let ab = blur(&prod(&|x, y| x * y), &w);

    let n = a.data.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let t = i as f64 - half;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Index into `0..n` with half-sample symmetric reflection (`abc|cba|abc`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur(g: &RealGrid, k: &[f64]) -> RealGrid {
    let half = (k.len() / 2) as isize;
    let (rows, cols) = (g.rows, g.cols);
    let mut tmp = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            tmp[r * cols + c] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * g.data[r * cols + reflect(c as isize + t as isize - half, cols)])
                .sum();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[reflect(r as isize + t as isize - half, rows) * cols + c])
                .sum();
        }
    }
    RealGrid { rows, cols, data: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;
    use num_complex::Complex64;

    fn real(rows: usize, cols: usize, data: Vec<f64>) -> RealGrid {
        RealGrid::new(rows, cols, data).unwrap()
    }

    #[test]
    fn rss_of_three_four_is_five() {
        let d = Dims::new(1, 1, 2).unwrap();
        let g = Grid::from_vec(d, vec![Complex64::new(3.0, 0.0), Complex64::new(0.0, 4.0)]).unwrap();
        assert_eq!(coil_combine_rss(&g).data, vec![5.0]);
    }

    #[test]
    fn rss_single_coil_is_magnitude_and_zero_stays_zero() {
        let d = Dims::new(1, 2, 1).unwrap();
        let g = Grid::from_vec(d, vec![Complex64::new(-2.0, 0.0), Complex64::new(0.6, 0.8)]).unwrap();
        let out = coil_combine_rss(&g);
        assert_eq!(out.data[0], 2.0);
        assert!((out.data[1] - 1.0).abs() < 1e-15);
        let z = coil_combine_rss(&Grid::zeros(Dims::new(3, 3, 4).unwrap()));
        assert!(z.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_images_are_perfect() {
        let a = real(4, 4, (0..16).map(|i| (i as f64).sin().abs() + 0.1).collect());
        let m = metrics(&a, &a).unwrap();
        assert_eq!(m.nmse, 0.0);
        assert_eq!(m.psnr, f64::INFINITY);
        assert_eq!(m.ssim, 1.0);
    }

    #[test]
    fn full_energy_error_has_unit_nmse() {
        let m = metrics(&real(1, 2, vec![1.0, 0.0]), &real(1, 2, vec![0.0, 0.0])).unwrap();
        assert_eq!(m.nmse, 1.0);
    }

    #[test]
    fn psnr_of_one_percent_mse_is_twenty_db() {
        // max(ref) = 1, errors of ±0.1 on every pixel → MSE = 0.01
        let reference = real(2, 2, vec![1.0, 0.5, 0.25, 0.0]);
        let rec = real(2, 2, vec![0.9, 0.6, 0.15, 0.1]);
        let m = metrics(&reference, &rec).unwrap();
        assert!((m.psnr - 20.0).abs() < 1e-9, "{}", m.psnr);
    }

    #[test]
    fn rejects_mismatch_and_zero_reference() {
        assert!(matches!(
            metrics(&real(1, 2, vec![1.0, 0.0]), &real(2, 1, vec![1.0, 0.0])),
            Err(Error::DimMismatch(_))
        ));
        assert!(matches!(
            metrics(&real(1, 2, vec![0.0, 0.0]), &real(1, 2, vec![1.0, 0.0])),
            Err(Error::ZeroNormReference)
        ));
    }

    #[test]
    fn ssim_drops_for_noisy_reconstruction() {
        let a = real(16, 16, (0..256).map(|i| ((i % 16) as f64 / 4.0).sin().abs()).collect());
        let b = real(16, 16, a.data.iter().enumerate().map(|(i, v)| v + 0.3 * ((i * 7919 % 13) as f64 / 13.0 - 0.5)).collect());
        let s = metrics(&a, &b).unwrap().ssim;
        assert!(s < 0.95 && s > -1.0, "{s}");
    }

    #[test]
    fn reflect_handles_offsets_beyond_one_period() {
        assert_eq!(reflect(-1, 3), 0);
        assert_eq!(reflect(3, 3), 2);
        assert_eq!(reflect(-7, 3), 0);
        assert_eq!(reflect(8, 3), 2);
    }
}

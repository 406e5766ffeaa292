//! Aggregate NMSE/PSNR/SSIM tables over a set of reconstructions.
//!
//! Spread is the population standard deviation (divide by `n`). When every
//! value in a column is equal — including all `+∞` PSNRs of perfect
//! reconstructions — the spread is 0; a column mixing `+∞` with finite
//! values has spread `+∞`.

use std::fmt;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::MetricsTriple;
use crate::train::image_metrics;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricsTriple>,
    pub mean: MetricsTriple,
    pub std: MetricsTriple,
}

/// `(mean, population std)` of one column.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.iter().all(|x| *x == v[0]) {
        return (v[0], 0.0);
    }
    let mean = v.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, f64::INFINITY);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Report over metrics that were already computed.
pub fn aggregate(rows: Vec<MetricsTriple>) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Empty("evaluation needs at least one (reference, reconstruction) pair".into()));
    }
    let col = |f: fn(&MetricsTriple) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
    let (nm, ns) = col(|m| m.nmse);
    let (pm, ps) = col(|m| m.psnr);
    let (sm, ss) = col(|m| m.ssim);
    Ok(EvalReport {
        rows,
        mean: MetricsTriple { nmse: nm, psnr: pm, ssim: sm },
        std: MetricsTriple { nmse: ns, psnr: ps, ssim: ss },
    })
}

/// Image-domain metrics of each `(reference, reconstruction)` k-space pair.
pub fn eval_report(pairs: &[(Grid, Grid)]) -> Result<EvalReport> {
    let rows = pairs.iter().map(|(r, x)| image_metrics(r, x)).collect::<Result<Vec<_>>>()?;
    aggregate(rows)
}

impl EvalReport {
    pub const HEADER: &'static str = "item\tnmse\tpsnr_db\tssim";

    /// `NMSE a ± b  PSNR c ± d dB  SSIM e ± f`
    pub fn summary(&self) -> String {
        format!(
            "NMSE {:.4e} ± {:.4e}  PSNR {:.2} ± {:.2} dB  SSIM {:.4} ± {:.4}",
            self.mean.nmse, self.std.nmse, self.mean.psnr, self.std.psnr, self.mean.ssim, self.std.ssim
        )
    }
}

fn row(f: &mut fmt::Formatter<'_>, label: &str, m: &MetricsTriple) -> fmt::Result {
    writeln!(f, "{label}\t{:.6e}\t{:.4}\t{:.6}", m.nmse, m.psnr, m.ssim)
}

/// Tab-separated table: one row per item, then `mean` and `std`.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::HEADER)?;
        for (i, m) in self.rows.iter().enumerate() {
            row(f, &i.to_string(), m)?;
        }
        row(f, "mean", &self.mean)?;
        row(f, "std", &self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_grid;
    use crate::Dims;

    #[test]
    fn identical_pair_is_perfect() {
        let x = seeded_grid(Dims::new(8, 8, 2).unwrap(), 3);
        let r = eval_report(&[(x.clone(), x)]).unwrap();
        assert_eq!(r.rows[0], MetricsTriple::PERFECT);
        assert_eq!(r.mean, MetricsTriple::PERFECT);
        assert_eq!(r.std, MetricsTriple { nmse: 0.0, psnr: 0.0, ssim: 0.0 });
        assert!(r.to_string().contains("mean\t0.000000e0\tinf\t1.000000"));
    }

    #[test]
    fn population_convention() {
        let rows = vec![
            MetricsTriple { nmse: 0.0, psnr: 30.0, ssim: 0.5 },
            MetricsTriple { nmse: 1.0, psnr: 20.0, ssim: 0.7 },
        ];
        let r = aggregate(rows).unwrap();
        assert_eq!((r.mean.nmse, r.std.nmse), (0.5, 0.5));
        assert_eq!((r.mean.psnr, r.std.psnr), (25.0, 5.0));
        assert!((r.std.ssim - 0.1).abs() < 1e-15);
    }

    #[test]
    fn mixed_infinite_psnr_has_unbounded_spread() {
        assert_eq!(mean_std(&[f64::INFINITY, 30.0]), (f64::INFINITY, f64::INFINITY));
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(eval_report(&[]), Err(Error::Empty(_))));
    }
}

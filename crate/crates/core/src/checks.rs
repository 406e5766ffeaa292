//! Self-checks runnable from a release binary: each suite exercises one
//! layer of the library on small seeded problems and counts passes.

use std::fmt;

use crate::deq::{self, Coords};
use crate::error::{Error, Result};
use crate::fixed_point::{pgd_map, project_dc, solve_fixed_point, zero_filled, FixedPointConfig};
use crate::grid::{Dims, Grid};
use crate::hankel::{self, FilterBank, SpecNormConfig, Window};
use crate::io;
use crate::networks::{lipschitz_normalize, NetworkParams, ResidualForm};
use crate::rng::{self, seeded_grid};
use crate::synth::{gen_mask, MaskKind, MaskSpec};
use crate::train::{LossKind, Mode, SamplePair};

pub const SUITES: [&str; 5] = ["hankel", "projection", "fixed-point", "gradient", "io"];

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub passed: usize,
    pub total: usize,
    /// `name: detail` of each failed check.
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}/{} passed", self.suite, self.passed, self.total)?;
        for e in &self.failures {
            write!(f, "\n  FAIL {e}")?;
        }
        Ok(())
    }
}

struct Suite {
    name: &'static str,
    results: Vec<(String, std::result::Result<(), String>)>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self { name, results: Vec::new() }
    }

    /// `f` returns `Ok(None)` on pass and `Ok(Some(why))` on failure.
    fn check(&mut self, name: impl Into<String>, f: impl FnOnce() -> Result<Option<String>>) {
        let out = match f() {
            Ok(None) => Ok(()),
            Ok(Some(why)) => Err(why),
            Err(e) => Err(e.to_string()),
        };
        self.results.push((name.into(), out));
    }

    fn finish(self) -> SuiteReport {
        let total = self.results.len();
        let failures: Vec<String> =
            self.results.into_iter().filter_map(|(n, r)| r.err().map(|e| format!("{n}: {e}"))).collect();
        SuiteReport { suite: self.name, passed: total - failures.len(), total, failures }
    }
}

fn bound(name: &str, value: f64, limit: f64) -> Option<String> {
    (value.is_nan() || value > limit).then(|| format!("{name} = {value:.6e} exceeds {limit:.6e}"))
}

pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    match name {
        "hankel" => Ok(hankel_suite(seed)),
        "projection" => Ok(projection_suite(seed)),
        "fixed-point" => Ok(fixed_point_suite(seed)),
        "gradient" => Ok(gradient_suite(seed)),
        "io" => Ok(io_suite(seed)),
        other => Err(Error::InvalidConfig(format!("unknown suite {other:?}; expected one of {}", SUITES.join(", ")))),
    }
}

fn random_bank(w: Window, coils: usize, r: usize, seed: u64) -> FilterBank {
    let mut g = rng::rng(seed);
    let coeffs = (0..r * coils * w.taps()).map(|_| rng::complex_normal(&mut g)).collect();
    FilterBank::new(w, coils, r, coeffs).expect("consistent filter shape")
}

fn hankel_suite(seed: u64) -> SuiteReport {
    let mut s = Suite::new("hankel");
    for (i, (n1, n2, nc, d1, d2)) in [(16, 1, 1, 5, 1), (12, 9, 2, 3, 4), (10, 10, 3, 2, 2)].into_iter().enumerate() {
        let dims = Dims::new(n1, n2, nc).unwrap();
        let w = Window::new(d1, d2).unwrap();
        let x = seeded_grid(dims, seed + i as u64);
        let bank = random_bank(w, nc, 2, seed + 10 + i as u64);
        s.check(format!("convolution equals lifted product {n1}x{n2}x{nc}"), || {
            let conv = hankel::conv_forward(&x, &bank)?;
            let h = hankel::hankel_lift(&x, w)?;
            let col = nalgebra::DVector::from_vec(bank.reversed_column(1));
            let prod = h * col;
            let (mut num, mut den) = (0.0, 0.0);
            for p in 0..dims.pixels() {
                num += (conv.as_slice()[p * 2 + 1] - prod[p]).norm_sqr();
                den += prod[p].norm_sqr();
            }
            Ok(bound("relative error", (num / den).sqrt(), 1e-12))
        });
        s.check(format!("adjoint dot test {n1}x{n2}x{nc}"), || {
            let u = seeded_grid(dims.with_channels(2), seed + 20 + i as u64);
            let lhs = hankel::conv_forward(&x, &bank)?.dot(&u);
            let rhs = x.dot(&hankel::conv_adjoint(&u, &bank)?);
            Ok(bound("relative mismatch", (lhs - rhs).norm() / lhs.norm(), 1e-12))
        });
        s.check(format!("exact norm bounds power estimate {n1}x{n2}x{nc}"), || {
            let exact = hankel::exact_lambda_max(&bank, dims)?;
            let mut worst: f64 = 0.0;
            for k in 0..5 {
                let v = seeded_grid(dims, seed + 30 + k);
                worst = worst.max(hankel::normal_operator(&v, &bank)?.real_dot(&v) / v.norm_sqr());
            }
            Ok((worst > exact * (1.0 + 1e-12)).then(|| format!("Rayleigh quotient {worst} above λ_max {exact}")))
        });
    }
    s.check("calibration annihilates a rank-2 signal", || {
        let dims = Dims::new(24, 24, 1).unwrap();
        let x = crate::synth::gen_harmonics(&crate::synth::HarmonicSpec::new(dims, vec![(1, 2), (-3, 5)], seed))?;
        let cal = hankel::calibrate_filters(&x, Window::new(3, 3)?, 5)?;
        Ok(bound("calibration residual", cal.residual, 1e-10))
    });
    s.finish()
}

fn projection_suite(seed: u64) -> SuiteReport {
    let mut s = Suite::new("projection");
    let dims = Dims::new(16, 12, 2).unwrap();
    let m = gen_mask(&MaskSpec::new(MaskKind::Random2d, 3.0, 4, 4, seed), 16, 12);
    let y = seeded_grid(dims, seed + 1);
    let r = seeded_grid(dims, seed + 2);
    s.check("sampled entries copy the data bitwise", || {
        let m = m.as_ref().map_err(|e| Error::InvalidMask(e.to_string()))?;
        let out = project_dc(&r, m, &y)?;
        Ok((!m.apply(&out)?.bitwise_eq(&m.apply(&y)?)).then(|| "sampled entries differ from y".into()))
    });
    s.check("unsampled entries are left unchanged", || {
        let m = m.as_ref().map_err(|e| Error::InvalidMask(e.to_string()))?;
        let out = project_dc(&r, m, &y)?;
        Ok((!m.apply_complement(&out)?.bitwise_eq(&m.apply_complement(&r)?)).then(|| "unsampled entries changed".into()))
    });
    s.check("projection is idempotent", || {
        let m = m.as_ref().map_err(|e| Error::InvalidMask(e.to_string()))?;
        let once = project_dc(&r, m, &y)?;
        Ok((!project_dc(&once, m, &y)?.bitwise_eq(&once)).then(|| "second projection changed the grid".into()))
    });
    s.check("full sampling returns the data", || {
        let full = crate::mask::SamplingMask::full(16, 12);
        Ok((!project_dc(&r, &full, &y)?.bitwise_eq(&y)).then(|| "output differs from y".into()))
    });
    s.finish()
}

fn small_sspgd(dims: Dims, r: usize, seed: u64) -> Result<NetworkParams> {
    let p = NetworkParams::sspgd(random_bank(Window::new(3, 3)?, dims.channels, r, seed), 1.0);
    Ok(lipschitz_normalize(&p, dims, &SpecNormConfig::default())?.0)
}

fn fixed_point_suite(seed: u64) -> SuiteReport {
    let mut s = Suite::new("fixed-point");
    let dims = Dims::new(16, 16, 2).unwrap();
    let setup = || -> Result<_> {
        let m = gen_mask(&MaskSpec::new(MaskKind::Random2d, 2.0, 4, 4, seed), 16, 16)?;
        let y = m.apply(&seeded_grid(dims, seed + 1))?;
        Ok((m, y, small_sspgd(dims, 24, seed + 2)?))
    };
    let plain_cfg = FixedPointConfig::default().with_tol(1e-10).with_max_iters(2000);
    s.check("plain iteration contracts", || {
        let (m, y, p) = setup()?;
        let rep = solve_fixed_point(zero_filled(&y, &m)?, |v| pgd_map(v, &p, &m, &y), &plain_cfg)?;
        if !rep.converged {
            return Ok(Some(format!("not converged after {} updates", rep.iters)));
        }
        Ok(bound("max step ratio", rep.contraction_est, 1.0))
    });
    s.check("anderson agrees with plain iteration", || {
        let (m, y, p) = setup()?;
        let a = solve_fixed_point(zero_filled(&y, &m)?, |v| pgd_map(v, &p, &m, &y), &plain_cfg)?;
        let b_cfg = FixedPointConfig::anderson().with_tol(1e-10).with_max_iters(2000);
        let b = solve_fixed_point(zero_filled(&y, &m)?, |v| pgd_map(v, &p, &m, &y), &b_cfg)?;
        if b.iters > a.iters {
            return Ok(Some(format!("anderson took {} updates, plain {}", b.iters, a.iters)));
        }
        Ok(bound("relative difference", a.solution.distance(&b.solution) / a.solution.norm(), 1e-7))
    });
    s.check("fixed point satisfies data consistency", || {
        let (m, y, p) = setup()?;
        let rep = solve_fixed_point(zero_filled(&y, &m)?, |v| pgd_map(v, &p, &m, &y), &plain_cfg)?;
        Ok((!m.apply(&rep.solution)?.bitwise_eq(&y)).then(|| "sampled entries differ from y".into()))
    });
    s.check("normalized networks are nonexpansive", || {
        let mut worst: f64 = 0.0;
        for p in [
            small_sspgd(dims, 8, seed + 3)?,
            NetworkParams::ksspgd_random(2, 8, 1.0, ResidualForm::Averaged, seed + 4)?,
        ] {
            let p = lipschitz_normalize(&p, dims, &SpecNormConfig::default())?.0;
            // `residual` is the gradient step `G(x) = x - η·N(x)`
            let g = |x: &Grid| -> Result<Grid> { p.residual(x) };
            for k in 0..4 {
                let a = seeded_grid(dims, seed + 40 + 2 * k);
                let b = seeded_grid(dims, seed + 41 + 2 * k);
                worst = worst.max(g(&a)?.distance(&g(&b)?) / a.distance(&b));
            }
        }
        Ok(bound("Lipschitz ratio", worst, 1.0 + 1e-12))
    });
    s.finish()
}

fn gradient_suite(seed: u64) -> SuiteReport {
    let mut s = Suite::new("gradient");
    let dims = Dims::new(8, 8, 2).unwrap();
    let problem = || -> Result<_> {
        let m = gen_mask(&MaskSpec::new(MaskKind::Random2d, 2.0, 2, 2, seed), 8, 8)?;
        SamplePair::new(&seeded_grid(dims, seed + 1), m, 0.5, seed + 2)?.problem(Mode::SelfSupervised, LossKind::NormalizedL2)
    };
    let cfg = FixedPointConfig::anderson().with_tol(1e-12).with_max_iters(5000);
    s.check("network vjp matches forward differences (dot test)", || {
        let mut worst: f64 = 0.0;
        for p in [small_sspgd(dims, 6, seed + 3)?, NetworkParams::ksspgd_random(2, 4, 0.5, ResidualForm::Averaged, seed + 4)?] {
            let x = seeded_grid(dims, seed + 5);
            let dx = seeded_grid(dims, seed + 6);
            let u = seeded_grid(dims, seed + 7);
            let h = 1e-6;
            let mut xp = x.clone();
            xp.axpy(h, &dx);
            let mut xm = x.clone();
            xm.axpy(-h, &dx);
            let fd = p.residual(&xp)?.sub(&p.residual(&xm)?).real_dot(&u) / (2.0 * h);
            let an = p.vjp_input(&x, &u)?.real_dot(&dx);
            worst = worst.max((fd - an).abs() / an.abs().max(1e-12));
        }
        Ok(bound("relative mismatch", worst, 1e-6))
    });
    s.check("implicit gradient matches central differences", || {
        let prob = problem()?;
        let p = small_sspgd(dims, 12, seed + 8)?;
        let rep = deq::gradient_check(&prob, &p, 1e-5, &Coords::Sampled(24), &cfg)?;
        Ok(bound("max relative error", rep.max_rel_err, 1e-4))
    });
    s.check("unrolled gradient approaches implicit gradient", || {
        let prob = problem()?;
        let p = small_sspgd(dims, 12, seed + 8)?;
        let implicit = deq::loss_and_gradient(&prob, &p, &cfg, &cfg)?.grad;
        let (_, unrolled) = deq::unrolled_gradient(&prob, &p, 300)?;
        let d: f64 = implicit.iter().zip(&unrolled).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let n: f64 = implicit.iter().map(|a| a * a).sum::<f64>().sqrt();
        Ok(bound("relative distance", d / n, 1e-6))
    });
    s.finish()
}

fn io_suite(seed: u64) -> SuiteReport {
    let mut s = Suite::new("io");
    let dims = Dims::new(8, 6, 2).unwrap();
    let g = seeded_grid(dims, seed);
    s.check("f64 grid roundtrip is bitwise", || {
        let back = io::read_grid(&io::encode_grid(&g, io::Dtype::F64)?[..])?;
        Ok((!back.bitwise_eq(&g)).then(|| "decoded grid differs".into()))
    });
    s.check("f32 grid roundtrip is a fixed point after one rounding", || {
        let once = io::read_grid(&io::encode_grid(&g, io::Dtype::F32)?[..])?;
        let twice = io::read_grid(&io::encode_grid(&once, io::Dtype::F32)?[..])?;
        Ok((!twice.bitwise_eq(&once)).then(|| "second roundtrip changed values".into()))
    });
    s.check("mask roundtrip", || {
        let m = gen_mask(&MaskSpec::new(MaskKind::Random1d, 2.0, 2, 1, seed), 8, 6)?;
        Ok((io::read_mask(&io::encode_mask(&m)?[..])? != m).then(|| "decoded mask differs".into()))
    });
    s.check("parameter roundtrip", || {
        let p = NetworkParams::hsspgd_random(2, 4, 0.5, 0.5, ResidualForm::Direct, seed)?;
        Ok((io::read_params(&io::encode_params(&p)?[..])? != p).then(|| "decoded parameters differ".into()))
    });
    s.check("bad magic is rejected", || {
        let mut bytes = io::encode_grid(&g, io::Dtype::F64)?;
        bytes[..4].copy_from_slice(b"XXXX");
        Ok((!matches!(io::read_grid(&bytes[..]), Err(Error::BadMagic { .. }))).then(|| "accepted bad magic".into()))
    });
    s.check("short payload is rejected", || {
        let bytes = io::encode_grid(&g, io::Dtype::F64)?;
        let cut = &bytes[..bytes.len() - 3];
        Ok((!matches!(io::read_grid(cut), Err(Error::Truncated(_)))).then(|| "accepted truncated payload".into()))
    });
    s.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for name in SUITES {
            let r = run_suite(name, 11).unwrap();
            assert!(r.ok(), "{r}");
            assert!(r.total > 0);
        }
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("nope", 0).is_err());
    }
}

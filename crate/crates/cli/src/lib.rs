//! The `kdeq` command line: data generation, calibration, training,
//! reconstruction and evaluation on the file formats of `kdeq_core::io`.
//!
//! [`run`] is the whole program; `main` only forwards its exit code.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};

use kdeq_core::checks;
use kdeq_core::deq::{self, Coords};
use kdeq_core::fixed_point::FixedPointConfig;
use kdeq_core::hankel::{self, SpecNormConfig, Window};
use kdeq_core::io::{self, Dtype};
use kdeq_core::networks::{lipschitz_normalize, NetworkParams, ResidualForm};
use kdeq_core::report;
use kdeq_core::synth::{self, HarmonicSpec, MaskKind, MaskSpec};
use kdeq_core::train::{self, LossKind, Mode, SamplePair, StepLog, TrainConfig};
use kdeq_core::{Dims, Grid};

/// `println!` that ignores a closed stdout (e.g. output piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "kdeq", version, about = "Self-supervised structured low-rank k-space interpolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize sums of k-space harmonics (one shared mode set per seed).
    Gen(GenArgs),
    /// Generate a sampling mask.
    Mask(MaskArgs),
    /// Estimate annihilating filters from the calibration region.
    Calibrate(CalibrateArgs),
    /// Train network parameters on undersampled data.
    Train(TrainArgs),
    /// Reconstruct missing k-space samples.
    Recon(ReconArgs),
    /// Tabulate NMSE/PSNR/SSIM of reconstructions against references.
    Eval(EvalArgs),
    /// Run built-in invariant suites.
    Check(CheckArgs),
    /// Compare the implicit gradient with central differences.
    Gradcheck(GradcheckArgs),
}

/// Options shared by every subcommand.
#[derive(Args, Debug)]
struct Common {
    /// `key = value` file; command-line flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    rows: usize,
    #[arg(long, default_value_t = 1)]
    cols: usize,
    #[arg(long, default_value_t = 1)]
    coils: usize,
    /// Number of harmonics (the Hankel rank).
    #[arg(long, default_value_t = 2)]
    rank: usize,
    /// Number of signals; more than one writes `<stem>_<i>.cks`.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Standard deviation of complex Gaussian noise added to every sample.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    dtype: DtypeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct MaskArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    rows: usize,
    #[arg(long, default_value_t = 1)]
    cols: usize,
    /// 1d-random, 1d-regular, 2d-random or 2d-regular.
    #[arg(long, default_value = "1d-random")]
    kind: String,
    #[arg(long, default_value_t = 4.0)]
    accel: f64,
    #[arg(long, default_value_t = 0)]
    acs_rows: usize,
    #[arg(long, default_value_t = 0)]
    acs_cols: usize,
    #[arg(long, default_value_t = 0.0)]
    density_exponent: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// k-space data, comma-separated; only the calibration region of the
    /// mask is read. Several inputs yield filters annihilating all of them.
    #[arg(long = "in", value_delimiter = ',', required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    mask: PathBuf,
    /// Window `D1xD2` (or `D` for 1-D data).
    #[arg(long, default_value = "4x4")]
    window: String,
    /// Number of filters.
    #[arg(long)]
    filters: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write spectrally normalized SSPGD parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Grid size the normalization is enforced on (defaults to the data).
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    #[arg(long, value_enum, default_value_t = SolverArg::Anderson)]
    solver: SolverArg,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
    #[arg(long, default_value_t = 5)]
    anderson_memory: usize,
}

impl SolverArgs {
    fn config(&self) -> FixedPointConfig {
        let base = match self.solver {
            SolverArg::Plain => FixedPointConfig::default(),
            SolverArg::Anderson => FixedPointConfig::anderson(),
        };
        FixedPointConfig { anderson_memory: self.anderson_memory, ..base.with_tol(self.tol).with_max_iters(self.max_iters) }
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated k-space files (undersampled by the mask on load).
    #[arg(long, value_delimiter = ',', required = true)]
    data: Vec<PathBuf>,
    /// One mask for every sample, or one per sample.
    #[arg(long, value_delimiter = ',', required = true)]
    mask: Vec<PathBuf>,
    /// Fully sampled references, required by `--mode supervised`.
    #[arg(long, value_delimiter = ',')]
    reference: Vec<PathBuf>,
    /// Initial parameters.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Initial SSPGD filters (alternative to `--init`).
    #[arg(long)]
    filters: Option<PathBuf>,
    /// Random initialization of a generalized network: ksspgd or hsspgd.
    #[arg(long)]
    network: Option<String>,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 1.0)]
    eta2: f64,
    #[arg(long, value_enum, default_value_t = FormArg::Averaged)]
    form: FormArg,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    /// Fraction of the sampled set used for data consistency (Λ).
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::SelfSupervised)]
    mode: ModeArg,
    /// `l2`, or `mixed:W` for an L2 weight `W` blended with L1.
    #[arg(long, default_value = "l2")]
    loss: String,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 1)]
    norm_every: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, value_enum, default_value_t = FailureArg::Skip)]
    on_failure: FailureArg,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
    /// Training log (tab-separated); stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct ReconArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fully sampled reference; prints NMSE/PSNR/SSIM.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    dtype: DtypeArg,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "ref", value_delimiter = ',', required = true)]
    reference: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    rec: Vec<PathBuf>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct CheckArgs {
    #[command(flatten)]
    common: Common,
    /// hankel, projection, fixed-point, gradient, io or all.
    #[arg(long, default_value = "all")]
    suite: String,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Number of randomly chosen coordinates; 0 checks all.
    #[arg(long, default_value_t = 0)]
    coords: usize,
    /// Exit with failure when the error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long, default_value_t = 20000)]
    max_iters: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SolverArg {
    Plain,
    Anderson,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    SelfSupervised,
    Supervised,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormArg {
    Direct,
    Averaged,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FailureArg {
    Skip,
    Abort,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

/// Runs the program on `argv` (including the program name) and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn init_logging() {
    let level = match std::env::var("KDEQ_LOG").as_deref() {
        Ok("quiet") => LevelFilter::Off,
        Ok("debug") => LevelFilter::Debug,
        _ => LevelFilter::Info,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).format_target(false).try_init();
    log::set_max_level(level);
}

/// Splices `--key value` pairs from a `--config` file in front of the
/// subcommand's own flags, so that explicit flags win.
fn merge_config(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let pos = argv.iter().position(|a| a == "--config");
    let inline = argv.iter().position(|a| a.to_str().is_some_and(|s| s.starts_with("--config=")));
    let path = match (pos, inline) {
        (Some(i), _) => match argv.get(i + 1) {
            Some(p) => PathBuf::from(p),
            None => return Ok(argv), // let clap report the missing value
        },
        (None, Some(i)) => PathBuf::from(&argv[i].to_str().unwrap()["--config=".len()..]),
        (None, None) => return Ok(argv),
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let pairs = io::parse_config(&text)?;
    // argv[0] is the program, argv[1] the subcommand
    if argv.len() < 2 {
        return Ok(argv);
    }
    let mut out: Vec<OsString> = argv[..2].to_vec();
    for (k, v) in pairs {
        out.push(format!("--{}", k.replace('_', "-")).into());
        out.push(v.into());
    }
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

fn load_grid(p: &Path) -> anyhow::Result<Grid> {
    io::load_grid(p).with_context(|| format!("reading {}", p.display()))
}

fn load_mask(p: &Path) -> anyhow::Result<kdeq_core::mask::SamplingMask> {
    io::load_mask(p).with_context(|| format!("reading {}", p.display()))
}

fn load_params(p: &Path) -> anyhow::Result<NetworkParams> {
    io::load_params(p).with_context(|| format!("reading {}", p.display()))
}

fn dispatch(cmd: Command) -> anyhow::Result<i32> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Mask(a) => cmd_mask(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Train(a) => cmd_train(a),
        Command::Recon(a) => cmd_recon(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Check(a) => cmd_check(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn numbered(out: &Path, i: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "cks".into());
    out.with_file_name(format!("{stem}_{i:03}.{ext}"))
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<i32> {
    let dims = Dims::new(a.rows, a.cols, a.coils)?;
    let seed = a.common.seed;
    let modes = synth::random_modes(dims, a.rank, seed)?;
    let signals = if a.count == 1 {
        vec![synth::gen_harmonics(&HarmonicSpec::new(dims, modes.clone(), seed.wrapping_add(1)))?]
    } else {
        synth::gen_ensemble(dims, &modes, a.count, seed.wrapping_add(1))?
    };
    for (i, x) in signals.iter().enumerate() {
        let x = if a.noise > 0.0 { synth::add_noise(x, a.noise, seed.wrapping_add(1000 + i as u64))? } else { x.clone() };
        let path = if a.count == 1 { a.out.clone() } else { numbered(&a.out, i) };
        io::save_grid(&path, &x, a.dtype.into())?;
        info!("wrote {}", path.display());
    }
    let list: Vec<String> = modes.iter().map(|(k1, k2)| format!("({k1},{k2})")).collect();
    say!("modes {}", list.join(" "));
    Ok(EXIT_OK)
}

fn cmd_mask(a: MaskArgs) -> anyhow::Result<i32> {
    let kind = MaskKind::parse(&a.kind).ok_or_else(|| anyhow!("unknown mask kind {:?}", a.kind))?;
    let mut spec = MaskSpec::new(kind, a.accel, a.acs_rows, a.acs_cols, a.common.seed);
    spec.density_exponent = a.density_exponent;
    let m = synth::gen_mask(&spec, a.rows, a.cols)?;
    io::save_mask(&a.out, &m)?;
    let total = a.rows * a.cols;
    say!("sampled {} of {} ({:.4}), effective acceleration {:.3}", m.count(), total, m.count() as f64 / total as f64, total as f64 / m.count() as f64);
    Ok(EXIT_OK)
}

fn parse_window(s: &str) -> anyhow::Result<Window> {
    let w = match s.split_once(['x', 'X']) {
        Some((a, b)) => Window::new(a.trim().parse()?, b.trim().parse()?)?,
        None => Window::line(s.trim().parse()?)?,
    };
    Ok(w)
}

fn parse_grid_size(s: &str, channels: usize) -> anyhow::Result<Dims> {
    let (a, b) = s.split_once(['x', 'X']).unwrap_or((s, "1"));
    Ok(Dims::new(a.trim().parse()?, b.trim().parse()?, channels)?)
}

fn cmd_calibrate(a: CalibrateArgs) -> anyhow::Result<i32> {
    let m = load_mask(&a.mask)?;
    let blocks = a.input.iter().map(|p| Ok(m.acs_block(&load_grid(p)?)?)).collect::<anyhow::Result<Vec<_>>>()?;
    let dims = load_grid(&a.input[0])?.dims();
    let w = parse_window(&a.window)?;
    let cal = hankel::calibrate_ensemble(&blocks, w, a.filters)?;
    io::save_filters(&a.out, &cal.filters)?;
    say!("calibration residual {:.6e}", cal.residual);
    say!("suggested rank {} (largest singular-value gap; {} filters requested)", cal.suggested_rank, a.filters);
    if !cal.flagged.is_empty() {
        say!("filters above residual threshold: {:?}", cal.flagged);
    }
    if let Some(path) = a.params {
        let dims = match &a.grid {
            Some(s) => parse_grid_size(s, dims.channels)?,
            None => dims,
        };
        let cfg = SpecNormConfig { epsilon: a.epsilon, ..SpecNormConfig::default() };
        let (p, rep) = lipschitz_normalize(&NetworkParams::sspgd(cal.filters, a.eta), dims, &cfg)?;
        io::save_params(&path, &p)?;
        say!("normalized: lambda before {:.6e}, scale {:.6e}, budget {:.3}", rep.norms_before[0], rep.scales[0], rep.budget);
    }
    Ok(EXIT_OK)
}

fn parse_loss(s: &str) -> anyhow::Result<LossKind> {
    match s.split_once(':') {
        None if s == "l2" => Ok(LossKind::NormalizedL2),
        Some(("mixed", w)) => Ok(LossKind::Mixed { l2_weight: w.parse()? }),
        _ => bail!("unknown loss {s:?}; expected l2 or mixed:W"),
    }
}

fn per_sample<T: Clone>(items: Vec<T>, n: usize, what: &str) -> anyhow::Result<Vec<T>> {
    match items.len() {
        1 => Ok(vec![items[0].clone(); n]),
        k if k == n => Ok(items),
        k => bail!("{k} {what} for {n} data files"),
    }
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<i32> {
    let n = a.data.len();
    let masks = per_sample(a.mask.iter().map(|p| load_mask(p)).collect::<anyhow::Result<Vec<_>>>()?, n, "masks")?;
    let mode = match a.mode {
        ModeArg::SelfSupervised => Mode::SelfSupervised,
        ModeArg::Supervised => Mode::Supervised,
    };
    if mode == Mode::Supervised && a.reference.len() != n {
        bail!("supervised training needs one --reference per data file");
    }
    let seed = a.common.seed;
    let mut samples = Vec::with_capacity(n);
    for (i, (path, m)) in a.data.iter().zip(masks).enumerate() {
        let y = m.apply(&load_grid(path)?)?;
        let mut s = SamplePair::new(&y, m, a.rho, seed.wrapping_add(i as u64))?;
        if let Some(r) = a.reference.get(i) {
            s = s.with_reference(load_grid(r)?);
        }
        samples.push(s);
    }
    let dims = samples[0].y_omega.dims();
    let form = match a.form {
        FormArg::Direct => ResidualForm::Direct,
        FormArg::Averaged => ResidualForm::Averaged,
    };
    let p0 = match (&a.init, &a.filters, a.network.as_deref()) {
        (Some(p), None, None) => load_params(p)?,
        (None, Some(f), None) => NetworkParams::sspgd(io::load_filters(f).with_context(|| format!("reading {}", f.display()))?, a.eta),
        (None, None, Some("ksspgd")) => NetworkParams::ksspgd_random(dims.channels, a.hidden, a.eta, form, seed)?,
        (None, None, Some("hsspgd")) => NetworkParams::hsspgd_random(dims.channels, a.hidden, a.eta, a.eta2, form, seed)?,
        (None, None, Some(other)) => bail!("unknown network {other:?}; expected ksspgd or hsspgd"),
        _ => bail!("give exactly one of --init, --filters or --network"),
    };
    let norm = SpecNormConfig { epsilon: a.epsilon, ..SpecNormConfig::default() };
    let p0 = lipschitz_normalize(&p0, dims, &norm)?.0;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        rho: a.rho,
        seed,
        loss: parse_loss(&a.loss)?,
        mode,
        norm_every: a.norm_every,
        norm,
        on_failure: match a.on_failure {
            FailureArg::Skip => train::FailurePolicy::Skip,
            FailureArg::Abort => train::FailurePolicy::Abort,
        },
        batch: a.batch,
        ..TrainConfig::default()
    };
    let mut sink: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(sink, "{}", StepLog::HEADER)?;
    let mut write_err = None;
    let state = train::train(&samples, &cfg, &a.solver.config(), p0, |e| {
        if let Err(err) = writeln!(sink, "{e}") {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    sink.flush()?;
    drop(sink);
    io::save_params(&a.out, &state.params)?;
    info!("{} steps, {} skipped samples; wrote {}", state.t, state.skipped.len(), a.out.display());
    Ok(EXIT_OK)
}

fn cmd_recon(a: ReconArgs) -> anyhow::Result<i32> {
    let m = load_mask(&a.mask)?;
    let y = m.apply(&load_grid(&a.input)?)?;
    let p = load_params(&a.params)?;
    let reference = a.reference.as_deref().map(load_grid).transpose()?;
    let rec = train::reconstruct(&y, &m, &p, &a.solver.config(), reference.as_ref())?;
    io::save_grid(&a.out, &rec.report.solution, a.dtype.into())?;
    let r = &rec.report;
    say!("iterations {} converged {} residual {:.3e}", r.iters, r.converged, r.final_residual);
    if let Some(mt) = rec.metrics {
        say!("NMSE {:.6e} PSNR {:.4} SSIM {:.6}", mt.nmse, mt.psnr, mt.ssim);
    }
    Ok(if r.converged { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<i32> {
    if a.reference.len() != a.rec.len() {
        bail!("{} references for {} reconstructions", a.reference.len(), a.rec.len());
    }
    let pairs: Vec<(Grid, Grid)> = a
        .reference
        .iter()
        .zip(&a.rec)
        .map(|(r, x)| Ok((load_grid(r)?, load_grid(x)?)))
        .collect::<anyhow::Result<_>>()?;
    let rep = report::eval_report(&pairs)?;
    match &a.out {
        Some(p) => {
            fs::write(p, rep.to_string())?;
            say!("{}", rep.summary());
        }
        None => {
            let _ = write!(std::io::stdout(), "{rep}");
        }
    }
    Ok(EXIT_OK)
}

fn cmd_check(a: CheckArgs) -> anyhow::Result<i32> {
    let names: Vec<&str> = if a.suite == "all" { checks::SUITES.to_vec() } else { vec![a.suite.as_str()] };
    let mut all_ok = true;
    for name in names {
        let rep = checks::run_suite(name, a.common.seed)?;
        say!("{rep}");
        all_ok &= rep.ok();
    }
    Ok(if all_ok { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<i32> {
    let m = load_mask(&a.mask)?;
    let y = m.apply(&load_grid(&a.input)?)?;
    let p = load_params(&a.params)?;
    let problem = SamplePair::new(&y, m, a.rho, a.common.seed)?.problem(Mode::SelfSupervised, LossKind::NormalizedL2)?;
    let coords = if a.coords == 0 { Coords::All } else { Coords::Sampled(a.coords) };
    let cfg = FixedPointConfig::anderson().with_tol(a.tol).with_max_iters(a.max_iters);
    let rep = deq::gradient_check(&problem, &p, a.h, &coords, &cfg)?;
    say!(
        "checked {} coordinates: max relative error {:.3e} (worst {:?}), {} kink coordinates excluded {:?}",
        rep.entries.len(),
        rep.max_rel_err,
        rep.worst,
        rep.kinks.len(),
        rep.kinks
    );
    Ok(if rep.max_rel_err <= a.threshold { EXIT_OK } else { EXIT_RUNTIME })
}

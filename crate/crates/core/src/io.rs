//! Versioned little-endian binary formats.
//!
//! | magic  | contents |
//! |--------|----------|
//! | `CKS1` | k-space or image grid: dims `u32 × 3`, dtype `u8` (0 = f32, 1 = f64), `(re, im)` payload, row-major, coil fastest |
//! | `MSK1` | sampling mask: rows, cols, role, acceleration, optional calibration rectangle, keep bits packed LSB-first |
//! | `FLT1` | filter bank: `r, d1, d2, Nc` then `(re, im)` f64 coefficients `[j][c][a][b]` |
//! | `PRM1` | network parameters: variant tag, step sizes, layer shapes, then payloads |
//!
//! Every header is validated before any payload is read, and declared
//! lengths are checked for overflow first.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::conv::{ConvLayer, ConvStack};
use crate::error::{Error, Result};
use crate::grid::{Dims, Grid};
use crate::hankel::{FilterBank, Window};
use crate::mask::{MaskRole, Rect, SamplingMask};
use crate::networks::{Activation, NetworkParams, ResidualForm};

pub const VERSION: u16 = 1;
pub const GRID_MAGIC: [u8; 4] = *b"CKS1";
pub const MASK_MAGIC: [u8; 4] = *b"MSK1";
pub const FILTER_MAGIC: [u8; 4] = *b"FLT1";
pub const PARAMS_MAGIC: [u8; 4] = *b"PRM1";

/// Refuse payloads above this many bytes (16 GiB) before allocating.
const MAX_PAYLOAD: u64 = 1 << 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

struct Reader<R> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| self.eof(e))?;
        Ok(b)
    }

    fn eof(&self, e: std::io::Error) -> Error {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Truncated(format!("{} ended early", self.what))
        } else {
            Error::Io(e)
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let found = self.bytes::<4>()?;
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let v = self.u16()?;
        if v != VERSION {
            return Err(Error::VersionMismatch { expected: VERSION, found: v });
        }
        Ok(())
    }

    fn payload(&mut self, len: u64) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(len).read_to_end(&mut buf)?;
        if (got as u64) < len {
            return Err(Error::Truncated(format!("{} payload has {got} of {len} bytes", self.what)));
        }
        Ok(buf)
    }

    fn f64s(&mut self, n: u64) -> Result<Vec<f64>> {
        let len = checked_bytes(&[n, 8])?;
        Ok(self.payload(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn dim(&mut self, name: &str) -> Result<usize> {
        let v = self.u32()?;
        if v == 0 {
            return Err(Error::Malformed(format!("{} has zero {name}", self.what)));
        }
        Ok(v as usize)
    }
}

/// Product of `parts`, failing with [`Error::DimsOverflow`] past [`MAX_PAYLOAD`].
fn checked_bytes(parts: &[u64]) -> Result<u64> {
    let mut acc: u64 = 1;
    for p in parts {
        acc = acc
            .checked_mul(*p)
            .filter(|v| *v <= MAX_PAYLOAD)
            .ok_or_else(|| Error::DimsOverflow(format!("{parts:?} exceeds {MAX_PAYLOAD} bytes")))?;
    }
    Ok(acc)
}

fn u32_of(v: usize, name: &str) -> Result<[u8; 4]> {
    u32::try_from(v).map(u32::to_le_bytes).map_err(|_| Error::DimsOverflow(format!("{name} = {v} does not fit u32")))
}

fn put_header(out: &mut Vec<u8>, magic: [u8; 4]) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: impl IntoIterator<Item = f64>) {
    v.into_iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

// ---- grids ----

pub fn encode_grid(g: &Grid, dtype: Dtype) -> Result<Vec<u8>> {
    let d = g.dims();
    let mut out = Vec::with_capacity(19 + d.len() * 2 * dtype.size() as usize);
    put_header(&mut out, GRID_MAGIC);
    for (v, n) in [(d.rows, "rows"), (d.cols, "cols"), (d.channels, "coils")] {
        out.extend_from_slice(&u32_of(v, n)?);
    }
    out.push(dtype.tag());
    for z in g.as_slice() {
        match dtype {
            Dtype::F64 => put_f64s(&mut out, [z.re, z.im]),
            Dtype::F32 => {
                out.extend_from_slice(&(z.re as f32).to_le_bytes());
                out.extend_from_slice(&(z.im as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn read_grid(r: impl Read) -> Result<Grid> {
    let mut rd = Reader { inner: r, what: "grid file" };
    rd.header(GRID_MAGIC)?;
    let (n1, n2, nc) = (rd.dim("rows")?, rd.dim("cols")?, rd.dim("coils")?);
    let dtype = match rd.u8()? {
        0 => Dtype::F32,
        1 => Dtype::F64,
        t => return Err(Error::Malformed(format!("unknown dtype tag {t}"))),
    };
    let len = checked_bytes(&[n1 as u64, n2 as u64, nc as u64, 2, dtype.size()])?;
    let raw = rd.payload(len)?;
    let vals: Vec<f64> = match dtype {
        Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    };
    let data = vals.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
    Grid::from_vec(Dims::new(n1, n2, nc)?, data)
}

// ---- masks ----

pub fn encode_mask(m: &SamplingMask) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_header(&mut out, MASK_MAGIC);
    out.extend_from_slice(&u32_of(m.rows(), "rows")?);
    out.extend_from_slice(&u32_of(m.cols(), "cols")?);
    out.push(m.role().tag());
    put_f64s(&mut out, [m.accel()]);
    match m.acs() {
        None => out.extend_from_slice(&[0; 17]),
        Some(a) => {
            out.push(1);
            for (v, n) in [(a.row0, "acs row"), (a.col0, "acs col"), (a.rows, "acs rows"), (a.cols, "acs cols")] {
                out.extend_from_slice(&u32_of(v, n)?);
            }
        }
    }
    let mut bits = vec![0u8; m.keep().len().div_ceil(8)];
    for (i, k) in m.keep().iter().enumerate() {
        if *k {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bits);
    Ok(out)
}

pub fn read_mask(r: impl Read) -> Result<SamplingMask> {
    let mut rd = Reader { inner: r, what: "mask file" };
    rd.header(MASK_MAGIC)?;
    let (rows, cols) = (rd.dim("rows")?, rd.dim("cols")?);
    let tag = rd.u8()?;
    let role = MaskRole::from_tag(tag).ok_or_else(|| Error::Malformed(format!("unknown mask role {tag}")))?;
    let accel = rd.f64()?;
    let has_acs = rd.u8()?;
    let rect = [rd.u32()?, rd.u32()?, rd.u32()?, rd.u32()?].map(|v| v as usize);
    let acs = match has_acs {
        0 => None,
        1 => Some(Rect { row0: rect[0], col0: rect[1], rows: rect[2], cols: rect[3] }),
        t => return Err(Error::Malformed(format!("calibration flag {t}"))),
    };
    let n = checked_bytes(&[rows as u64, cols as u64])?;
    let bits = rd.payload(n.div_ceil(8))?;
    let keep = (0..n as usize).map(|i| bits[i / 8] & (1 << (i % 8)) != 0).collect();
    SamplingMask::new(rows, cols, keep, acs, accel, role).map_err(|e| Error::Malformed(e.to_string()))
}

// ---- filters ----

fn put_filters(out: &mut Vec<u8>, s: &FilterBank) -> Result<()> {
    let w = s.window();
    for (v, n) in [(s.count(), "filters"), (w.d1, "d1"), (w.d2, "d2"), (s.coils(), "coils")] {
        out.extend_from_slice(&u32_of(v, n)?);
    }
    put_f64s(out, s.coeffs().iter().flat_map(|z| [z.re, z.im]));
    Ok(())
}

fn take_filters<R: Read>(rd: &mut Reader<R>) -> Result<FilterBank> {
    let (r, d1, d2, nc) = (rd.dim("filter count")?, rd.dim("d1")?, rd.dim("d2")?, rd.dim("coils")?);
    let n = checked_bytes(&[r as u64, d1 as u64, d2 as u64, nc as u64, 2])?;
    let vals = rd.f64s(n)?;
    let coeffs = vals.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
    FilterBank::new(Window::new(d1, d2)?, nc, r, coeffs)
}

pub fn encode_filters(s: &FilterBank) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_header(&mut out, FILTER_MAGIC);
    put_filters(&mut out, s)?;
    Ok(out)
}

pub fn read_filters(r: impl Read) -> Result<FilterBank> {
    let mut rd = Reader { inner: r, what: "filter file" };
    rd.header(FILTER_MAGIC)?;
    take_filters(&mut rd)
}

// ---- network parameters ----

fn put_stack(out: &mut Vec<u8>, s: &ConvStack) -> Result<()> {
    out.extend_from_slice(&u32_of(s.layers.len(), "layers")?);
    for l in &s.layers {
        for (v, n) in [(l.in_ch, "in channels"), (l.out_ch, "out channels"), (l.kernel, "kernel")] {
            out.extend_from_slice(&u32_of(v, n)?);
        }
        out.push(l.bias.is_some() as u8);
    }
    for l in &s.layers {
        put_f64s(out, l.weight.iter().copied());
        put_f64s(out, l.bias.iter().flatten().copied());
    }
    Ok(())
}

fn take_stack<R: Read>(rd: &mut Reader<R>) -> Result<ConvStack> {
    let n = rd.dim("layer count")?;
    if n > 1024 {
        return Err(Error::DimsOverflow(format!("{n} layers")));
    }
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let (i, o, k) = (rd.dim("in channels")?, rd.dim("out channels")?, rd.dim("kernel")?);
        let bias = match rd.u8()? {
            0 => false,
            1 => true,
            t => return Err(Error::Malformed(format!("bias flag {t}"))),
        };
        checked_bytes(&[i as u64, o as u64, k as u64, k as u64, 8])?;
        shapes.push((i, o, k, bias));
    }
    let mut layers = Vec::with_capacity(n);
    for (i, o, k, bias) in shapes {
        let w = rd.f64s((i * o * k * k) as u64)?;
        let b = if bias { Some(rd.f64s(o as u64)?) } else { None };
        layers.push(ConvLayer::new(i, o, k, w, b)?);
    }
    ConvStack::new(layers)
}

fn form_tag(f: ResidualForm) -> u8 {
    match f {
        ResidualForm::Direct => 0,
        ResidualForm::Averaged => 1,
    }
}

fn form_of(t: u8) -> Result<ResidualForm> {
    match t {
        0 => Ok(ResidualForm::Direct),
        1 => Ok(ResidualForm::Averaged),
        _ => Err(Error::Malformed(format!("residual form tag {t}"))),
    }
}

pub fn encode_params(p: &NetworkParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_header(&mut out, PARAMS_MAGIC);
    match p {
        NetworkParams::Sspgd { filters, eta, activation } => {
            out.push(0);
            out.push(matches!(activation, Activation::Identity) as u8);
            put_f64s(&mut out, [*eta]);
            put_filters(&mut out, filters)?;
        }
        NetworkParams::Ksspgd { kspace, eta, form } => {
            out.push(1);
            out.push(form_tag(*form));
            put_f64s(&mut out, [*eta]);
            put_stack(&mut out, kspace)?;
        }
        NetworkParams::Hsspgd { kspace, image, eta1, eta2, form } => {
            out.push(2);
            out.push(form_tag(*form));
            put_f64s(&mut out, [*eta1, *eta2]);
            put_stack(&mut out, kspace)?;
            put_stack(&mut out, image)?;
        }
    }
    Ok(out)
}

pub fn read_params(r: impl Read) -> Result<NetworkParams> {
    let mut rd = Reader { inner: r, what: "parameter file" };
    rd.header(PARAMS_MAGIC)?;
    let variant = rd.u8()?;
    let flag = rd.u8()?;
    match variant {
        0 => {
            let activation = match flag {
                0 => Activation::Relu,
                1 => Activation::Identity,
                t => return Err(Error::Malformed(format!("activation tag {t}"))),
            };
            let eta = rd.f64()?;
            Ok(NetworkParams::Sspgd { filters: take_filters(&mut rd)?, eta, activation })
        }
        1 => {
            let eta = rd.f64()?;
            Ok(NetworkParams::Ksspgd { kspace: take_stack(&mut rd)?, eta, form: form_of(flag)? })
        }
        2 => {
            let (eta1, eta2) = (rd.f64()?, rd.f64()?);
            let kspace = take_stack(&mut rd)?;
            let image = take_stack(&mut rd)?;
            Ok(NetworkParams::Hsspgd { kspace, image, eta1, eta2, form: form_of(flag)? })
        }
        t => Err(Error::Malformed(format!("unknown network variant {t}"))),
    }
}

// ---- files ----

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn save_grid(path: impl AsRef<Path>, g: &Grid, dtype: Dtype) -> Result<()> {
    write_file(path.as_ref(), &encode_grid(g, dtype)?)
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Grid> {
    read_grid(open(path.as_ref())?)
}

pub fn save_mask(path: impl AsRef<Path>, m: &SamplingMask) -> Result<()> {
    write_file(path.as_ref(), &encode_mask(m)?)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<SamplingMask> {
    read_mask(open(path.as_ref())?)
}

pub fn save_filters(path: impl AsRef<Path>, s: &FilterBank) -> Result<()> {
    write_file(path.as_ref(), &encode_filters(s)?)
}

pub fn load_filters(path: impl AsRef<Path>) -> Result<FilterBank> {
    read_filters(open(path.as_ref())?)
}

pub fn save_params(path: impl AsRef<Path>, p: &NetworkParams) -> Result<()> {
    write_file(path.as_ref(), &encode_params(p)?)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<NetworkParams> {
    read_params(open(path.as_ref())?)
}

/// Parses `key = value` lines. Blank lines and lines starting with `#`
/// are ignored; later keys override earlier ones.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value, got {line:?}", no + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::InvalidConfig(format!("line {}: empty key", no + 1)));
        }
        out.retain(|(key, _)| key != k);
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_grid;

    #[test]
    fn grid_roundtrip_is_bitwise() {
        let g = seeded_grid(Dims::new(8, 8, 2).unwrap(), 1);
        let bytes = encode_grid(&g, Dtype::F64).unwrap();
        assert_eq!(bytes.len(), 19 + 8 * 8 * 2 * 16);
        assert!(read_grid(&bytes[..]).unwrap().bitwise_eq(&g));
    }

    #[test]
    fn f32_grids_store_single_precision() {
        let g = seeded_grid(Dims::new(3, 2, 1).unwrap(), 2);
        let back = read_grid(&encode_grid(&g, Dtype::F32).unwrap()[..]).unwrap();
        for (a, b) in g.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(b.re, a.re as f32 as f64);
        }
        assert!(read_grid(&encode_grid(&back, Dtype::F32).unwrap()[..]).unwrap().bitwise_eq(&back));
    }

    #[test]
    fn header_errors() {
        let g = seeded_grid(Dims::new(8, 8, 2).unwrap(), 1);
        let mut bytes = encode_grid(&g, Dtype::F64).unwrap();
        assert!(matches!(read_grid(&bytes[..bytes.len() - 5]), Err(Error::Truncated(_))));
        assert!(matches!(read_grid(&bytes[..3]), Err(Error::Truncated(_))));
        bytes[4] = 9;
        assert!(matches!(read_grid(&bytes[..]), Err(Error::VersionMismatch { found: 9, .. })));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_grid(&bytes[..]), Err(Error::BadMagic { found, .. }) if &found == b"XXXX"));
        let mut huge = Vec::new();
        put_header(&mut huge, GRID_MAGIC);
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        huge.push(1);
        assert!(matches!(read_grid(&huge[..]), Err(Error::DimsOverflow(_))));
    }

    #[test]
    fn mask_roundtrip() {
        let acs = Rect::centered(9, 5, 3, 5).unwrap();
        let keep: Vec<bool> = (0..45).map(|i| acs.contains(i / 5, i % 5) || i % 7 == 0).collect();
        let m = SamplingMask::new(9, 5, keep, Some(acs), 3.5, MaskRole::Lambda).unwrap();
        assert_eq!(read_mask(&encode_mask(&m).unwrap()[..]).unwrap(), m);
        let full = SamplingMask::full(3, 3);
        assert_eq!(read_mask(&encode_mask(&full).unwrap()[..]).unwrap(), full);
    }

    #[test]
    fn filters_and_params_roundtrip() {
        let mut g = crate::rng::rng(3);
        let coeffs = (0..2 * 3 * 4).map(|_| crate::rng::complex_normal(&mut g)).collect();
        let s = FilterBank::new(Window::new(2, 2).unwrap(), 3, 2, coeffs).unwrap();
        assert_eq!(read_filters(&encode_filters(&s).unwrap()[..]).unwrap(), s);
        let nets = [
            NetworkParams::sspgd(s.clone(), 0.7),
            NetworkParams::sspgd_linear(s, 1.0),
            NetworkParams::ksspgd_random(2, 4, 0.5, ResidualForm::Averaged, 1).unwrap(),
            NetworkParams::hsspgd_random(1, 3, 0.5, 0.25, ResidualForm::Direct, 2).unwrap(),
        ];
        for p in nets {
            let bytes = encode_params(&p).unwrap();
            let q = read_params(&bytes[..]).unwrap();
            assert_eq!(q, p);
            assert_eq!(encode_params(&q).unwrap(), bytes);
            assert!(matches!(read_params(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        }
    }

    #[test]
    fn config_lines() {
        let cfg = parse_config("# c\nseed = 4\n\nlr=1e-3\nseed=5\n").unwrap();
        assert_eq!(cfg, vec![("lr".into(), "1e-3".into()), ("seed".into(), "5".into())]);
        assert!(parse_config("novalue\n").is_err());
        assert!(parse_config("=3\n").is_err());
    }
}

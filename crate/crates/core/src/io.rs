//! On-disk formats: k-space (`KSP1`), masks (`MSK1`), nullspace bases
//! (`NSB1`), network checkpoints (`NNW1`), GRAPPA kernels (`GRP1`),
//! 16-bit PGM images and CSV tables.
//!
//! All binary formats are little-endian with 64-bit floats. Readers check
//! the magic, the header-implied length and every dimension before
//! allocating, and reject anything that does not match exactly. Byte
//! layouts are documented in `docs/FORMATS.md`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grappa::GrappaKernelSet;
use crate::grid::{KSpace, MagnitudeImage};
use crate::loraki::{Activation, LorakiNetwork};
use crate::loraks::NullspaceBasis;
use crate::neuralk::{ConvLayer, ParamSet};
use crate::raki::{RakiHyper, RakiNet};
use crate::sampling::{AcsRegion, MaskStyle, SamplingMask};
use crate::scalar::Real;
use crate::support::{KernelSupport, Offset, SupportShape};

pub const KSPACE_MAGIC: [u8; 4] = *b"KSP1";
pub const MASK_MAGIC: [u8; 4] = *b"MSK1";
pub const NULLSPACE_MAGIC: [u8; 4] = *b"NSB1";
pub const NETWORK_MAGIC: [u8; 4] = *b"NNW1";
pub const GRAPPA_MAGIC: [u8; 4] = *b"GRP1";

// ---------------------------------------------------------------------------
// byte-level helpers

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_i32(out: &mut Vec<u8>, v: isize) -> Result<()> {
    let v = i32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64<T: Real>(out: &mut Vec<u8>, v: T) {
    out.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
}

fn put_complex<T: Real>(out: &mut Vec<u8>, v: Complex<T>) {
    put_f64(out, v.re);
    put_f64(out, v.im);
}

/// Product of header fields times an element size, rejecting overflow.
fn checked_len(parts: &[usize], element: usize, what: &str) -> Result<usize> {
    parts
        .iter()
        .try_fold(element, |acc, &p| acc.checked_mul(p))
        .ok_or_else(|| Error::DimensionOverflow(format!("{what} dimensions {parts:?} overflow")))
}

/// Sequential reader over a byte buffer.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::DimensionOverflow("payload length overflows".into()))?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    /// Fails with `Truncated` unless `n` more bytes are available, without
    /// consuming them.
    fn require(&self, n: usize) -> Result<()> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::DimensionOverflow("payload length overflows".into()))?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        Ok(())
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("four bytes");
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")) as usize)
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn real<T: Real>(&mut self) -> Result<T> {
        Ok(T::lit(self.f64()?))
    }

    fn complex<T: Real>(&mut self) -> Result<Complex<T>> {
        let re = self.real()?;
        Ok(Complex::new(re, self.real()?))
    }

    /// Header dimension that must be at least one.
    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u32()?;
        if v == 0 {
            return Err(Error::Format(format!("{what} is zero")));
        }
        Ok(v)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::TrailingBytes {
                expected: self.pos as u64,
                actual: self.bytes.len() as u64,
            });
        }
        Ok(())
    }

    /// Rejects files whose total length differs from `total`.
    fn exact(&self, total: usize) -> Result<()> {
        match self.bytes.len() {
            n if n < total => Err(Error::Truncated {
                expected: total as u64,
                actual: n as u64,
            }),
            n if n > total => Err(Error::TrailingBytes {
                expected: total as u64,
                actual: n as u64,
            }),
            _ => Ok(()),
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// KSP1

pub fn encode_kspace<T: Real>(k: &KSpace<T>) -> Result<Vec<u8>> {
    let len = checked_len(&[k.n1(), k.n2(), k.channels()], 16, "k-space")?;
    let mut out = Vec::with_capacity(16 + len);
    out.extend_from_slice(&KSPACE_MAGIC);
    put_u32(&mut out, k.n1())?;
    put_u32(&mut out, k.n2())?;
    put_u32(&mut out, k.channels())?;
    for &v in k.data() {
        put_complex(&mut out, v);
    }
    Ok(out)
}

pub fn decode_kspace<T: Real>(bytes: &[u8]) -> Result<KSpace<T>> {
    let mut c = Cursor::new(bytes);
    c.magic(KSPACE_MAGIC)?;
    let (n1, n2, l) = (c.dim("n1")?, c.dim("n2")?, c.dim("channel count")?);
    let payload = checked_len(&[n1, n2, l], 16, "k-space")?;
    c.exact(16usize.checked_add(payload).ok_or_else(|| Error::DimensionOverflow("k-space size".into()))?)?;
    let mut data = Vec::with_capacity(n1 * n2 * l);
    for _ in 0..n1 * n2 * l {
        data.push(c.complex()?);
    }
    KSpace::from_vec(n1, n2, l, data)
}

pub fn write_kspace<T: Real>(k: &KSpace<T>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_kspace(k)?)
}

pub fn read_kspace<T: Real>(path: impl AsRef<Path>) -> Result<KSpace<T>> {
    decode_kspace(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// MSK1

pub fn encode_mask(mask: &SamplingMask) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(28 + mask.n1() * mask.n2());
    out.extend_from_slice(&MASK_MAGIC);
    put_u32(&mut out, mask.n1())?;
    put_u32(&mut out, mask.n2())?;
    match mask.acs() {
        Some(r) => {
            for v in [r.k1.start, r.k1.end, r.k2.start, r.k2.end] {
                put_i32(&mut out, v as isize)?;
            }
        }
        None => {
            for _ in 0..4 {
                put_i32(&mut out, -1)?;
            }
        }
    }
    out.extend(mask.sampled().iter().map(|&s| s as u8));
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<SamplingMask> {
    let mut c = Cursor::new(bytes);
    c.magic(MASK_MAGIC)?;
    let (n1, n2) = (c.dim("n1")?, c.dim("n2")?);
    let rect = [c.i32()?, c.i32()?, c.i32()?, c.i32()?];
    let total = checked_len(&[n1, n2], 1, "mask")?
        .checked_add(28)
        .ok_or_else(|| Error::DimensionOverflow("mask size".into()))?;
    c.exact(total)?;
    let acs = match rect {
        [-1, -1, -1, -1] => None,
        [a, b, p, q] if a >= 0 && b >= 0 && p >= 0 && q >= 0 => Some(AcsRegion {
            k1: a as usize..b as usize,
            k2: p as usize..q as usize,
        }),
        _ => return Err(Error::Format(format!("invalid ACS rectangle {rect:?}"))),
    };
    let raw = c.take(n1 * n2)?;
    let mut sampled = Vec::with_capacity(raw.len());
    for (i, &b) in raw.iter().enumerate() {
        match b {
            0 => sampled.push(false),
            1 => sampled.push(true),
            _ => return Err(Error::Format(format!("mask byte {i} is {b}, expected 0 or 1"))),
        }
    }
    SamplingMask::new(n1, n2, sampled, acs).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_mask(mask: &SamplingMask, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mask(mask)?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<SamplingMask> {
    decode_mask(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// NSB1

pub fn encode_nullspace<T: Real>(basis: &NullspaceBasis<T>) -> Result<Vec<u8>> {
    let m = basis.matrix();
    let mut out = Vec::with_capacity(12 + 16 * m.len());
    out.extend_from_slice(&NULLSPACE_MAGIC);
    put_u32(&mut out, m.nrows())?;
    put_u32(&mut out, m.ncols())?;
    // nalgebra storage is column-major already
    for &v in m.as_slice() {
        put_complex(&mut out, v);
    }
    Ok(out)
}

pub fn decode_nullspace<T: Real>(bytes: &[u8]) -> Result<NullspaceBasis<T>> {
    let mut c = Cursor::new(bytes);
    c.magic(NULLSPACE_MAGIC)?;
    let (q, cols) = (c.dim("row count")?, c.dim("column count")?);
    let payload = checked_len(&[q, cols], 16, "nullspace")?;
    c.exact(12usize.checked_add(payload).ok_or_else(|| Error::DimensionOverflow("nullspace size".into()))?)?;
    let mut data = Vec::with_capacity(q * cols);
    for _ in 0..q * cols {
        data.push(c.complex()?);
    }
    NullspaceBasis::new(DMatrix::from_vec(q, cols, data))
}

pub fn write_nullspace<T: Real>(basis: &NullspaceBasis<T>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_nullspace(basis)?)
}

pub fn read_nullspace<T: Real>(path: impl AsRef<Path>) -> Result<NullspaceBasis<T>> {
    decode_nullspace(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// NNW1

fn shape_code(s: SupportShape) -> u8 {
    match s {
        SupportShape::Rectangular => 0,
        SupportShape::Ellipsoidal => 1,
    }
}

/// Encodes a list of parameter sets (one for LORAKI, one per real output
/// channel for RAKI).
pub fn encode_params<T: Real>(sets: &[ParamSet<T>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&NETWORK_MAGIC);
    put_u32(&mut out, sets.len())?;
    for set in sets {
        put_u32(&mut out, set.layers.len())?;
        put_u32(&mut out, set.scalars.len())?;
        for layer in &set.layers {
            let s = layer.support();
            put_u32(&mut out, layer.in_channels())?;
            put_u32(&mut out, layer.out_channels())?;
            put_u32(&mut out, s.r1())?;
            put_u32(&mut out, s.r2())?;
            out.push(shape_code(s.shape()));
            for w in layer.to_weights() {
                put_f64(&mut out, w);
            }
        }
        for &v in &set.scalars {
            put_f64(&mut out, v);
        }
    }
    Ok(out)
}

pub fn decode_params<T: Real>(bytes: &[u8]) -> Result<Vec<ParamSet<T>>> {
    let mut c = Cursor::new(bytes);
    c.magic(NETWORK_MAGIC)?;
    let count = c.u32()?;
    // every set needs at least its two counts
    c.require(checked_len(&[count], 8, "network")?)?;
    let mut sets = Vec::with_capacity(count);
    for _ in 0..count {
        let (nl, ns) = (c.u32()?, c.u32()?);
        let mut layers = Vec::with_capacity(nl.min(1024));
        for _ in 0..nl {
            let (cin, cout) = (c.dim("layer input width")?, c.dim("layer output width")?);
            let (r1, r2) = (c.u32()?, c.u32()?);
            let shape = match c.u8()? {
                0 => SupportShape::Rectangular,
                1 => SupportShape::Ellipsoidal,
                b => return Err(Error::Format(format!("unknown support shape code {b}"))),
            };
            let support = KernelSupport::new(r1, r2, shape).map_err(|e| Error::Format(e.to_string()))?;
            let n = checked_len(&[cin, cout, support.len()], 1, "layer")?;
            c.require(checked_len(&[n], 8, "layer")?)?;
            let mut w = Vec::with_capacity(n);
            for _ in 0..n {
                w.push(c.real()?);
            }
            layers.push(ConvLayer::from_weights(cin, cout, support, &w)?);
        }
        c.require(checked_len(&[ns], 8, "scalars")?)?;
        let mut scalars = Vec::with_capacity(ns);
        for _ in 0..ns {
            scalars.push(c.real()?);
        }
        sets.push(ParamSet { layers, scalars });
    }
    c.finish()?;
    Ok(sets)
}

pub fn write_params<T: Real>(sets: &[ParamSet<T>], path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_params(sets)?)
}

pub fn read_params<T: Real>(path: impl AsRef<Path>) -> Result<Vec<ParamSet<T>>> {
    decode_params(&fs::read(path)?)
}

/// Support description in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportRecord {
    pub r1: usize,
    pub r2: usize,
    pub shape: SupportShape,
}

impl From<&KernelSupport> for SupportRecord {
    fn from(s: &KernelSupport) -> Self {
        Self {
            r1: s.r1(),
            r2: s.r2(),
            shape: s.shape(),
        }
    }
}

/// Sidecar text manifest of a LORAKI checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorakiManifest {
    pub channels: usize,
    pub hidden: usize,
    pub iterations: usize,
    pub lambda: f64,
    pub activation: Activation,
    pub supports: Vec<SupportRecord>,
    pub seed: u64,
    pub mask_style: Option<MaskStyle>,
}

/// Sidecar text manifest of a RAKI checkpoint; the configurations and
/// their training flags are needed to apply the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RakiManifest {
    pub seed: u64,
    pub trained: Vec<bool>,
    pub configs: Vec<Vec<[i64; 2]>>,
    pub hyper: RakiHyper,
}

/// Path of the text manifest next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".toml");
    path.with_file_name(name)
}

pub fn write_toml<S: Serialize>(value: &S, path: impl AsRef<Path>) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_toml<S: DeserializeOwned>(path: impl AsRef<Path>) -> Result<S> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
}

/// Writes `net` to `path` plus the sidecar manifest.
pub fn save_loraki<T: Real>(net: &LorakiNetwork<T>, seed: u64, mask_style: Option<MaskStyle>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_params(std::slice::from_ref(net.params()), path)?;
    let manifest = LorakiManifest {
        channels: net.channels(),
        hidden: net.hidden(),
        iterations: net.iterations(),
        lambda: net.lambda().to_f64().unwrap_or(f64::NAN),
        activation: net.activation(),
        supports: net.params().layers.iter().map(|l| l.support().into()).collect(),
        seed,
        mask_style,
    };
    write_toml(&manifest, sidecar_path(path))
}

pub fn load_loraki<T: Real>(path: impl AsRef<Path>) -> Result<(LorakiNetwork<T>, LorakiManifest)> {
    let path = path.as_ref();
    let manifest: LorakiManifest = read_toml(sidecar_path(path))?;
    let mut sets = read_params::<T>(path)?;
    if sets.len() != 1 || sets[0].layers.len() != 2 || sets[0].scalars.len() != 1 {
        return Err(Error::Format("LORAKI checkpoint holds one set of two layers and one scalar".into()));
    }
    let ParamSet { mut layers, scalars } = sets.remove(0);
    let g2 = layers.pop().expect("two layers");
    let g1 = layers.pop().expect("two layers");
    let net = LorakiNetwork::from_parts(g1, g2, scalars[0], manifest.iterations, manifest.activation)?;
    Ok((net, manifest))
}

pub fn save_raki<T: Real>(net: &RakiNet<T>, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_params(net.nets(), path)?;
    let manifest = RakiManifest {
        seed,
        trained: net.trained().to_vec(),
        configs: net
            .configs()
            .iter()
            .map(|c| c.iter().map(|&(p, q)| [p as i64, q as i64]).collect())
            .collect(),
        hyper: net.hyper().clone(),
    };
    write_toml(&manifest, sidecar_path(path))
}

pub fn load_raki<T: Real>(path: impl AsRef<Path>) -> Result<(RakiNet<T>, RakiManifest)> {
    let path = path.as_ref();
    let manifest: RakiManifest = read_toml(sidecar_path(path))?;
    let sets = read_params::<T>(path)?;
    let configs: Vec<Vec<Offset>> = manifest
        .configs
        .iter()
        .map(|c| c.iter().map(|&[p, q]| (p as isize, q as isize)).collect())
        .collect();
    let net = RakiNet::from_parts(manifest.hyper.clone(), configs, manifest.trained.clone(), sets)?;
    Ok((net, manifest))
}

// ---------------------------------------------------------------------------
// GRP1

pub fn encode_grappa<T: Real>(set: &GrappaKernelSet<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&GRAPPA_MAGIC);
    let (r1, r2) = set.kernel_shape();
    put_u32(&mut out, r1)?;
    put_u32(&mut out, r2)?;
    put_u32(&mut out, set.channels())?;
    put_u32(&mut out, set.configs().len())?;
    for (j, config) in set.configs().iter().enumerate() {
        put_u32(&mut out, config.len())?;
        for &(p, q) in config {
            put_i32(&mut out, p)?;
            put_i32(&mut out, q)?;
        }
        for &w in set.weights(j) {
            put_complex(&mut out, w);
        }
    }
    Ok(out)
}

pub fn decode_grappa<T: Real>(bytes: &[u8]) -> Result<GrappaKernelSet<T>> {
    let mut c = Cursor::new(bytes);
    c.magic(GRAPPA_MAGIC)?;
    let (r1, r2, l, j) = (c.dim("kernel rows")?, c.dim("kernel columns")?, c.dim("channel count")?, c.u32()?);
    c.require(checked_len(&[j], 4, "configurations")?)?;
    let (mut configs, mut weights) = (Vec::with_capacity(j), Vec::with_capacity(j));
    for _ in 0..j {
        let m = c.u32()?;
        c.require(checked_len(&[m], 8, "configuration")?)?;
        let mut offsets = Vec::with_capacity(m);
        for _ in 0..m {
            offsets.push((c.i32()? as isize, c.i32()? as isize));
        }
        let n = checked_len(&[m, l, l], 1, "kernel")?;
        c.require(checked_len(&[n], 16, "kernel")?)?;
        let mut w = Vec::with_capacity(n);
        for _ in 0..n {
            w.push(c.complex()?);
        }
        configs.push(offsets);
        weights.push(w);
    }
    c.finish()?;
    GrappaKernelSet::from_parts((r1, r2), l, configs, weights).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_grappa<T: Real>(set: &GrappaKernelSet<T>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_grappa(set)?)
}

pub fn read_grappa<T: Real>(path: impl AsRef<Path>) -> Result<GrappaKernelSet<T>> {
    decode_grappa(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// PGM

/// 16-bit grayscale image, row-major, `height` rows of `width` samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm16 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl Pgm16 {
    /// Quantizes `image / scale` clipped to `[0, 1]`; rows are `k1`.
    pub fn from_image<T: Real>(image: &MagnitudeImage<T>, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidParameter(format!("PGM scale must be positive, got {scale}")));
        }
        let data = image
            .data()
            .iter()
            .map(|v| {
                let x = (v.to_f64().unwrap_or(0.0) / scale).clamp(0.0, 1.0);
                (x * 65535.0).round() as u16
            })
            .collect();
        Ok(Self {
            width: image.n2(),
            height: image.n1(),
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        out.reserve(2 * self.data.len());
        for &v in &self.data {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out
    }

    /// Parses a binary 16-bit PGM (comments in the header are allowed).
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(Error::Format("not a binary PGM (missing P5)".into()));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(Error::Truncated { expected: pos as u64 + 1, actual: bytes.len() as u64 }),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
            *field = text
                .parse()
                .map_err(|_| Error::Format(format!("bad PGM header field at byte {start}")))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 65535 {
            return Err(Error::Format(format!("expected a 16-bit PGM, maxval is {maxval}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Format("PGM has a zero dimension".into()));
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(Error::Format("PGM header must end with one whitespace byte".into())),
        }
        let mut c = Cursor::new(bytes);
        let total = checked_len(&[width, height], 2, "PGM")?
            .checked_add(pos)
            .ok_or_else(|| Error::DimensionOverflow("PGM size".into()))?;
        c.exact(total)?;
        c.take(pos)?;
        let data = c
            .take(2 * width * height)?
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect();
        Ok(Self { width, height, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.encode())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

// ---------------------------------------------------------------------------
// CSV

/// Row of the per-run metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub nrmse: f64,
    pub ssim: f64,
}

/// Row of a per-method error spectrum table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EspRow {
    pub bin_center: f64,
    pub ratio: f64,
}

/// Row of a per-method timing table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub runtime_seconds: f64,
}

/// Row of an aggregated sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub method: String,
    pub nrmse: f64,
    pub ssim: f64,
}

/// Serializes rows with a header line. Floats use the shortest
/// representation that parses back to the same bits.
pub fn encode_csv<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn decode_csv<R: DeserializeOwned>(bytes: &[u8]) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_reader(bytes);
    let rows = r.deserialize().collect::<std::result::Result<Vec<R>, _>>()?;
    Ok(rows)
}

pub fn write_csv<R: Serialize>(rows: &[R], path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_csv(rows)?)
}

pub fn read_csv<R: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<R>> {
    decode_csv(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::sampling::uniform_mask;

    fn rand_kspace(n1: usize, n2: usize, c: usize, seed: u64) -> KSpace<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KSpace::from_fn(n1, n2, c, |_, _, _| Complex::new(rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3)))
    }

    fn bits(k: &KSpace<f64>) -> Vec<(u64, u64)> {
        k.data().iter().map(|v| (v.re.to_bits(), v.im.to_bits())).collect()
    }

    #[test]
    fn kspace_round_trip_is_bitwise() {
        let k = rand_kspace(8, 8, 2, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.ksp");
        write_kspace(&k, &path).unwrap();
        let back: KSpace<f64> = read_kspace(&path).unwrap();
        assert_eq!(bits(&k), bits(&back));
        assert_eq!(fs::read(&path).unwrap().len(), 16 + 8 * 8 * 2 * 16);
    }

    #[test]
    fn kspace_header_layout() {
        let k = rand_kspace(3, 5, 2, 2);
        let b = encode_kspace(&k).unwrap();
        assert_eq!(&b[..4], b"KSP1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        // second sample is (k1=0, k2=0, ch=1)
        let re = f64::from_le_bytes(b[32..40].try_into().unwrap());
        assert_eq!(re.to_bits(), k.get(0, 0, 1).re.to_bits());
    }

    #[test]
    fn kspace_errors_are_distinct() {
        let good = encode_kspace(&rand_kspace(4, 4, 1, 3)).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_kspace::<f64>(&bad), Err(Error::BadMagic { .. })));
        match decode_kspace::<f64>(&good[..good.len() - 5]) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, good.len() as u64);
                assert_eq!(actual, good.len() as u64 - 5);
            }
            other => panic!("{other:?}"),
        }
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_kspace::<f64>(&long), Err(Error::TrailingBytes { .. })));
        let mut huge = good[..16].to_vec();
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_kspace::<f64>(&huge), Err(Error::DimensionOverflow(_))));
        assert!(matches!(decode_kspace::<f64>(b"KS"), Err(Error::Truncated { .. })));
        let mut zero = good.clone();
        zero[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_kspace::<f64>(&zero), Err(Error::Format(_))));
    }

    #[test]
    fn mask_round_trip_and_validation() {
        let m = uniform_mask(12, 20, 3, 6).unwrap();
        let b = encode_mask(&m).unwrap();
        assert_eq!(b.len(), 28 + 240);
        assert_eq!(decode_mask(&b).unwrap(), m);
        assert_eq!(encode_mask(&decode_mask(&b).unwrap()).unwrap(), b);
        let no_acs = SamplingMask::new(2, 2, vec![true, false, false, true], None).unwrap();
        let nb = encode_mask(&no_acs).unwrap();
        assert_eq!(i32::from_le_bytes(nb[12..16].try_into().unwrap()), -1);
        assert_eq!(decode_mask(&nb).unwrap(), no_acs);
        let mut bad = b.clone();
        bad[30] = 2;
        assert!(matches!(decode_mask(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_mask(&b[..b.len() - 1]), Err(Error::Truncated { .. })));
        let mut rect = nb.clone();
        rect[12..16].copy_from_slice(&0i32.to_le_bytes());
        assert!(matches!(decode_mask(&rect), Err(Error::Format(_))));
    }

    #[test]
    fn nullspace_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m: DMatrix<Complex<f64>> = DMatrix::from_fn(18, 3, |_, _| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let basis = NullspaceBasis::new(m.clone()).unwrap();
        let b = encode_nullspace(&basis).unwrap();
        // column-major: second stored entry is row 1 of column 0
        assert_eq!(f64::from_le_bytes(b[28..36].try_into().unwrap()).to_bits(), m[(1, 0)].re.to_bits());
        let back: NullspaceBasis<f64> = decode_nullspace(&b).unwrap();
        assert_eq!(back.matrix(), &m);
        assert!(matches!(decode_nullspace::<f64>(&b[..20]), Err(Error::Truncated { .. })));
    }

    fn rand_params(seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamSet {
            layers: vec![
                ConvLayer::kaiming(4, 3, KernelSupport::ellipsoidal(3, 5).unwrap(), 1.0, &mut rng),
                ConvLayer::kaiming(3, 2, KernelSupport::rectangular(1, 3).unwrap(), 1.0, &mut rng),
            ],
            scalars: vec![rng.gen(), rng.gen()],
        }
    }

    #[test]
    fn params_round_trip_and_errors() {
        let sets = vec![rand_params(5), rand_params(6)];
        let b = encode_params(&sets).unwrap();
        let back: Vec<ParamSet<f64>> = decode_params(&b).unwrap();
        assert_eq!(back, sets);
        assert_eq!(encode_params(&back).unwrap(), b);
        assert!(matches!(decode_params::<f64>(&b[..b.len() - 3]), Err(Error::Truncated { .. })));
        let mut long = b.clone();
        long.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_params::<f64>(&long), Err(Error::TrailingBytes { .. })));
        let mut many = b[..8].to_vec();
        many[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_params::<f64>(&many), Err(Error::Truncated { .. })));
        assert!(matches!(decode_params::<f64>(b"NNW2\0\0\0\0"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn loraki_checkpoint_with_manifest() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = LorakiNetwork::<f64>::init(
            8,
            5,
            KernelSupport::ellipsoidal(3, 3).unwrap(),
            4,
            0.7,
            crate::loraki::OutputInit::Kaiming { gain: 0.1 },
            &mut rng,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.nnw");
        save_loraki(&net, 11, Some(MaskStyle::Uniform { accel: 4 }), &path).unwrap();
        let (back, manifest) = load_loraki::<f64>(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(manifest.seed, 11);
        assert_eq!(manifest.hidden, 5);
        assert_eq!(manifest.lambda, 0.7);
        assert_eq!(manifest.mask_style, Some(MaskStyle::Uniform { accel: 4 }));
        assert!(sidecar_path(&path).ends_with("net.nnw.toml"));
    }

    #[test]
    fn raki_checkpoint_with_manifest() {
        let hyper = RakiHyper { c1: 3, c2: 2, kernel1: (3, 3), kernel2: (1, 1), kernel3: (3, 1), ..Default::default() };
        let configs = vec![vec![(-1, 0), (1, 0)], vec![(0, -1), (0, 1), (-1, -1)]];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let nets = (0..4)
            .map(|_| crate::raki::init_channel_net::<f64, _>(&hyper, 4, configs.len(), &mut rng).unwrap())
            .collect();
        let net = RakiNet::from_parts(hyper, configs, vec![true, false], nets).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raki.nnw");
        save_raki(&net, 3, &path).unwrap();
        let (back, manifest) = load_raki::<f64>(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(manifest.seed, 3);
    }

    #[test]
    fn grappa_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let configs: Vec<Vec<Offset>> = vec![vec![(-1, 0), (1, 0)], vec![(0, -2), (0, 2), (2, 1)]];
        let weights = configs
            .iter()
            .map(|c| (0..c.len() * 4).map(|_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen())).collect())
            .collect();
        let set = GrappaKernelSet::<f64>::from_parts((5, 5), 2, configs, weights).unwrap();
        let b = encode_grappa(&set).unwrap();
        let back = decode_grappa::<f64>(&b).unwrap();
        assert_eq!(back, set);
        assert_eq!(encode_grappa(&back).unwrap(), b);
        assert!(matches!(decode_grappa::<f64>(&b[..b.len() - 1]), Err(Error::Truncated { .. })));
        let mut long = b.clone();
        long.push(1);
        assert!(matches!(decode_grappa::<f64>(&long), Err(Error::TrailingBytes { .. })));
    }

    #[test]
    fn pgm_quantization_and_parsing() {
        let img = MagnitudeImage::from_vec(2, 3, vec![0.0, 0.5, 1.0, 2.0, 0.25, 0.75]).unwrap();
        let p = Pgm16::from_image(&img, 1.0).unwrap();
        assert_eq!(p.data, vec![0, 32768, 65535, 65535, 16384, 49151]);
        let b = p.encode();
        assert!(b.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(Pgm16::decode(&b).unwrap(), p);
        let commented = [b"P5 # gold\n3 2 65535\n".as_slice(), &b[13..]].concat();
        assert_eq!(Pgm16::decode(&commented).unwrap(), p);
        assert!(matches!(Pgm16::decode(&b[..b.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(Pgm16::decode(b"P2\n1 1\n65535\n\0\0"), Err(Error::Format(_))));
        assert!(matches!(Pgm16::decode(b"P5\n1 1\n255\n\0"), Err(Error::Format(_))));
        assert!(Pgm16::from_image(&img, 0.0).is_err());
    }

    #[test]
    fn csv_rows_round_trip() {
        let rows = vec![
            MetricsRow { method: "grappa".into(), nrmse: 0.1 + 0.2, ssim: 1.0 / 3.0 },
            MetricsRow { method: "loraki".into(), nrmse: 1e-300, ssim: 0.999_999_999_999_9 },
        ];
        let b = encode_csv(&rows).unwrap();
        assert!(b.starts_with(b"method,nrmse,ssim\n"));
        let back: Vec<MetricsRow> = decode_csv(&b).unwrap();
        assert_eq!(back, rows);
        assert!(decode_csv::<MetricsRow>(b"method,nrmse,ssim\nx,notanumber,1\n").is_err());
    }

    proptest! {
        #[test]
        fn kspace_round_trip_any_bits(n1 in 1usize..6, n2 in 1usize..6, l in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // arbitrary finite bit patterns, including subnormals and signed zeros
            let mut draw = || loop {
                let v = f64::from_bits(rng.gen());
                if v.is_finite() {
                    return v;
                }
            };
            let k = KSpace::from_fn(n1, n2, l, |_, _, _| Complex::new(draw(), draw()));
            let b = encode_kspace(&k).unwrap();
            let back: KSpace<f64> = decode_kspace(&b).unwrap();
            prop_assert_eq!(bits(&k), bits(&back));
            prop_assert_eq!(encode_kspace(&back).unwrap(), b);
        }

        #[test]
        fn esp_csv_round_trip(values in proptest::collection::vec((any::<f64>(), any::<f64>()), 0..20)) {
            let rows: Vec<EspRow> = values
                .iter()
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .map(|&(bin_center, ratio)| EspRow { bin_center, ratio })
                .collect();
            let back: Vec<EspRow> = decode_csv(&encode_csv(&rows).unwrap()).unwrap();
            prop_assert_eq!(back.len(), rows.len());
            for (a, b) in back.iter().zip(&rows) {
                prop_assert_eq!(a.bin_center.to_bits(), b.bin_center.to_bits());
                prop_assert_eq!(a.ratio.to_bits(), b.ratio.to_bits());
            }
        }

        #[test]
        fn mask_round_trip_random(n1 in 1usize..10, n2 in 1usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sampled: Vec<bool> = (0..n1 * n2).map(|_| rng.gen()).collect();
            sampled[0] = true;
            let m = SamplingMask::new(n1, n2, sampled, None).unwrap();
            prop_assert_eq!(decode_mask(&encode_mask(&m).unwrap()).unwrap(), m);
        }
    }
}

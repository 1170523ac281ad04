//! Cartesian undersampling masks, ACS extraction and enumeration of the
//! local sampling configurations seen by interpolation kernels.

use std::collections::HashMap;
use std::ops::Range;

use num_complex::Complex;
use rand::seq::index::sample_weighted;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::KSpace;
use crate::scalar::Real;
use crate::support::{KernelSupport, Offset};

/// Default exponent of the radial variable-density law `(1 - r)^p`.
pub const DEFAULT_DENSITY_EXPONENT: f64 = 3.0;

/// Fully sampled calibration rectangle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcsRegion {
    pub k1: Range<usize>,
    pub k2: Range<usize>,
}

impl AcsRegion {
    pub fn contains(&self, k1: usize, k2: usize) -> bool {
        self.k1.contains(&k1) && self.k2.contains(&k2)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.k1.len(), self.k2.len())
    }
}

/// Binary sampling indicator over an `n1 x n2` grid (`k2` is the
/// phase-encoding axis for 1D patterns).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    n1: usize,
    n2: usize,
    sampled: Vec<bool>,
    acs: Option<AcsRegion>,
}

impl SamplingMask {
    pub fn new(n1: usize, n2: usize, sampled: Vec<bool>, acs: Option<AcsRegion>) -> Result<Self> {
        if sampled.len() != n1 * n2 {
            return Err(Error::Dimension(format!(
                "mask of {n1}x{n2} needs {} entries, got {}",
                n1 * n2,
                sampled.len()
            )));
        }
        if let Some(r) = &acs {
            if r.k1.is_empty() || r.k2.is_empty() || r.k1.end > n1 || r.k2.end > n2 {
                return Err(Error::InvalidParameter(format!(
                    "ACS region {r:?} does not fit a {n1}x{n2} grid"
                )));
            }
            for k1 in r.k1.clone() {
                for k2 in r.k2.clone() {
                    if !sampled[k1 * n2 + k2] {
                        return Err(Error::InvalidParameter(format!(
                            "ACS location ({k1}, {k2}) is not sampled"
                        )));
                    }
                }
            }
        }
        if !sampled.iter().any(|&s| s) {
            return Err(Error::InvalidParameter("mask samples nothing".into()));
        }
        Ok(Self {
            n1,
            n2,
            sampled,
            acs,
        })
    }

    pub fn full(n1: usize, n2: usize) -> Self {
        Self {
            n1,
            n2,
            sampled: vec![true; n1 * n2],
            acs: Some(AcsRegion {
                k1: 0..n1,
                k2: 0..n2,
            }),
        }
    }

    #[inline]
    pub fn n1(&self) -> usize {
        self.n1
    }

    #[inline]
    pub fn n2(&self) -> usize {
        self.n2
    }

    #[inline]
    pub fn is_sampled(&self, k1: usize, k2: usize) -> bool {
        self.sampled[k1 * self.n2 + k2]
    }

    /// Sampling state at a signed location; outside the grid counts as not
    /// sampled.
    #[inline]
    pub fn is_sampled_at(&self, k1: isize, k2: isize) -> bool {
        k1 >= 0
            && k2 >= 0
            && (k1 as usize) < self.n1
            && (k2 as usize) < self.n2
            && self.sampled[k1 as usize * self.n2 + k2 as usize]
    }

    pub fn sampled(&self) -> &[bool] {
        &self.sampled
    }

    pub fn acs(&self) -> Option<&AcsRegion> {
        self.acs.as_ref()
    }

    pub fn count(&self) -> usize {
        self.sampled.iter().filter(|&&s| s).count()
    }

    /// Sub-mask over a window; the ACS region is clipped to the window.
    pub fn window(&self, rows: Range<usize>, cols: Range<usize>) -> Result<Self> {
        if rows.end > self.n1 || cols.end > self.n2 {
            return Err(Error::Dimension("mask window outside grid".into()));
        }
        let mut sampled = Vec::with_capacity(rows.len() * cols.len());
        for k1 in rows.clone() {
            sampled.extend_from_slice(&self.sampled[k1 * self.n2 + cols.start..k1 * self.n2 + cols.end]);
        }
        let acs = self.acs.as_ref().and_then(|r| {
            let k1 = r.k1.start.max(rows.start)..r.k1.end.min(rows.end);
            let k2 = r.k2.start.max(cols.start)..r.k2.end.min(cols.end);
            (!k1.is_empty() && !k2.is_empty()).then(|| AcsRegion {
                k1: k1.start - rows.start..k1.end - rows.start,
                k2: k2.start - cols.start..k2.end - cols.start,
            })
        });
        Self::new(rows.len(), cols.len(), sampled, acs)
    }

    /// Reflection through the DC sample, used for virtual conjugate coils.
    pub fn reflected(&self) -> Self {
        use crate::kspace::reflect_index;
        let mut sampled = vec![false; self.sampled.len()];
        for k1 in 0..self.n1 {
            for k2 in 0..self.n2 {
                sampled[k1 * self.n2 + k2] =
                    self.is_sampled(reflect_index(k1, self.n1), reflect_index(k2, self.n2));
            }
        }
        Self {
            n1: self.n1,
            n2: self.n2,
            sampled,
            acs: None,
        }
    }
}

fn centered_range(n: usize, len: usize) -> Range<usize> {
    let start = (n / 2).saturating_sub(len / 2).min(n - len);
    start..start + len
}

fn lattice_lines(n2: usize, accel: usize, candidates: Range<usize>) -> impl Iterator<Item = usize> {
    let phase = (n2 / 2) % accel;
    candidates.filter(move |k2| k2 % accel == phase)
}

fn line_mask(
    n1: usize,
    n2: usize,
    lines: impl Iterator<Item = usize>,
    acs_lines: usize,
) -> Result<SamplingMask> {
    let mut sampled = vec![false; n1 * n2];
    let mut mark = |k2: usize| {
        for k1 in 0..n1 {
            sampled[k1 * n2 + k2] = true;
        }
    };
    for k2 in lines {
        mark(k2);
    }
    let acs = (acs_lines > 0).then(|| AcsRegion {
        k1: 0..n1,
        k2: centered_range(n2, acs_lines),
    });
    if let Some(r) = &acs {
        for k2 in r.k2.clone() {
            mark(k2);
        }
    }
    SamplingMask::new(n1, n2, sampled, acs)
}

/// Every `accel`-th phase-encoding (`k2`) line, anchored on the DC line,
/// plus `acs_lines` fully sampled central lines.
pub fn uniform_mask(n1: usize, n2: usize, accel: usize, acs_lines: usize) -> Result<SamplingMask> {
    if accel == 0 {
        return Err(Error::InvalidParameter("acceleration must be >= 1".into()));
    }
    if acs_lines > n2 {
        return Err(Error::InvalidParameter(format!(
            "{acs_lines} ACS lines exceed {n2} phase-encoding lines"
        )));
    }
    line_mask(n1, n2, lattice_lines(n2, accel, 0..n2), acs_lines)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PartialFourierSide {
    /// Keep the lowest-index lines.
    #[default]
    Early,
    Late,
}

/// Partial Fourier along `k2` with the early side kept.
pub fn partial_fourier_mask(
    n1: usize,
    n2: usize,
    pf_fraction: f64,
    accel: usize,
    acs_lines: usize,
) -> Result<SamplingMask> {
    partial_fourier_mask_side(n1, n2, pf_fraction, accel, acs_lines, PartialFourierSide::Early)
}

pub fn partial_fourier_mask_side(
    n1: usize,
    n2: usize,
    pf_fraction: f64,
    accel: usize,
    acs_lines: usize,
    side: PartialFourierSide,
) -> Result<SamplingMask> {
    if !(pf_fraction > 0.5 && pf_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "partial Fourier fraction {pf_fraction} must lie in (0.5, 1]"
        )));
    }
    if accel == 0 || acs_lines > n2 {
        return Err(Error::InvalidParameter(
            "partial Fourier needs accel >= 1 and ACS within the grid".into(),
        ));
    }
    let kept = ((pf_fraction * n2 as f64).ceil() as usize).min(n2);
    let candidates = match side {
        PartialFourierSide::Early => 0..kept,
        PartialFourierSide::Late => n2 - kept..n2,
    };
    let mask = line_mask(n1, n2, lattice_lines(n2, accel, candidates.clone()), acs_lines)?;
    if let Some(r) = mask.acs() {
        if r.k2.start < candidates.start || r.k2.end > candidates.end {
            return Err(Error::InvalidParameter(
                "ACS lines extend into the omitted partial Fourier region".into(),
            ));
        }
    }
    Ok(mask)
}

/// Normalized radius in `[0, 1]` of each grid location from the center.
fn radial_weights(n1: usize, n2: usize, exponent: f64) -> Vec<f64> {
    let (c1, c2) = ((n1 / 2) as f64, (n2 / 2) as f64);
    let h1 = (n1 as f64 / 2.0).max(1.0);
    let h2 = (n2 as f64 / 2.0).max(1.0);
    let mut r = Vec::with_capacity(n1 * n2);
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            let x = (k1 as f64 - c1) / h1;
            let y = (k2 as f64 - c2) / h2;
            r.push((x * x + y * y).sqrt());
        }
    }
    let rmax = r.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    r.into_iter()
        .map(|v| (1.0 - v / rmax).max(0.0).powf(exponent).max(1e-9))
        .collect()
}

/// Draws `extra` locations among the `candidates` without replacement with
/// the radial density.
fn draw_weighted<R: Rng>(rng: &mut R, weights: &[f64], candidates: &[usize], extra: usize) -> Vec<usize> {
    if extra == 0 {
        return Vec::new();
    }
    let picked = sample_weighted(rng, candidates.len(), |i| weights[candidates[i]], extra)
        .expect("positive weights and enough candidates");
    picked.into_iter().map(|i| candidates[i]).collect()
}

/// 2D variable-density random mask with a fully sampled centered
/// `acs_size` block; the total sample count is `round(n1 n2 / target_accel)`.
pub fn variable_density_mask(
    n1: usize,
    n2: usize,
    target_accel: f64,
    acs_size: (usize, usize),
    seed: u64,
) -> Result<SamplingMask> {
    variable_density_mask_with_exponent(n1, n2, target_accel, acs_size, seed, DEFAULT_DENSITY_EXPONENT)
}

pub fn variable_density_mask_with_exponent(
    n1: usize,
    n2: usize,
    target_accel: f64,
    acs_size: (usize, usize),
    seed: u64,
    exponent: f64,
) -> Result<SamplingMask> {
    if !(target_accel >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target acceleration {target_accel} must be >= 1"
        )));
    }
    let (m1, m2) = acs_size;
    if m1 > n1 || m2 > n2 {
        return Err(Error::InvalidParameter(format!(
            "ACS {m1}x{m2} does not fit {n1}x{n2}"
        )));
    }
    let total = ((n1 * n2) as f64 / target_accel).round() as usize;
    let acs_count = m1 * m2;
    if total < acs_count || total == 0 {
        return Err(Error::InvalidParameter(format!(
            "target of {total} samples is smaller than the {acs_count}-sample ACS block"
        )));
    }
    let acs = (m1 > 0 && m2 > 0).then(|| AcsRegion {
        k1: centered_range(n1, m1),
        k2: centered_range(n2, m2),
    });
    let mut sampled = vec![false; n1 * n2];
    if let Some(r) = &acs {
        for k1 in r.k1.clone() {
            for k2 in r.k2.clone() {
                sampled[k1 * n2 + k2] = true;
            }
        }
    }
    let candidates: Vec<usize> = (0..n1 * n2).filter(|&i| !sampled[i]).collect();
    let weights = radial_weights(n1, n2, exponent);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in draw_weighted(&mut rng, &weights, &candidates, total - acs_count) {
        sampled[i] = true;
    }
    SamplingMask::new(n1, n2, sampled, acs)
}

/// `(n1 n2) / (number of sampled locations)`.
pub fn effective_acceleration(mask: &SamplingMask) -> f64 {
    (mask.n1 * mask.n2) as f64 / mask.count() as f64
}

/// Zero-fills every channel at unsampled locations.
pub fn apply_mask<T: Real>(kspace: &KSpace<T>, mask: &SamplingMask) -> Result<KSpace<T>> {
    check_dims(kspace, mask)?;
    let mut out = kspace.clone();
    let nc = out.channels();
    for (px, &s) in out.data_mut().chunks_exact_mut(nc).zip(&mask.sampled) {
        if !s {
            px.fill(Complex::default());
        }
    }
    Ok(out)
}

/// Copies the ACS block out of a dataset.
pub fn extract_acs<T: Real>(kspace: &KSpace<T>, mask: &SamplingMask) -> Result<KSpace<T>> {
    check_dims(kspace, mask)?;
    let r = mask
        .acs()
        .ok_or_else(|| Error::InvalidParameter("mask has no ACS region".into()))?;
    kspace.crop(r.k1.clone(), r.k2.clone())
}

fn check_dims<T>(kspace: &KSpace<T>, mask: &SamplingMask) -> Result<()> {
    if kspace.n1() != mask.n1 || kspace.n2() != mask.n2 {
        return Err(Error::Dimension(format!(
            "k-space {}x{} vs mask {}x{}",
            kspace.n1(),
            kspace.n2(),
            mask.n1,
            mask.n2
        )));
    }
    Ok(())
}

/// Local sampling neighbourhood `Lambda_k` of one target: the kernel offsets
/// `m` with `k - m` inside the grid and sampled.
pub fn local_config(mask: &SamplingMask, support: &KernelSupport, k1: usize, k2: usize) -> Vec<Offset> {
    support
        .offsets()
        .iter()
        .copied()
        .filter(|&(p, q)| mask.is_sampled_at(k1 as isize - p, k2 as isize - q))
        .collect()
}

/// Distinct local sampling configurations of the unsampled locations and
/// their disjoint indicator masks `g_j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalConfigSet {
    n1: usize,
    n2: usize,
    configs: Vec<Vec<Offset>>,
    /// Per-location config index, `-1` for sampled or unreachable locations.
    labels: Vec<i32>,
    unreachable: Vec<bool>,
}

impl LocalConfigSet {
    pub fn dims(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    /// The distinct `Lambda_j`, in order of first appearance (row-major).
    pub fn configs(&self) -> &[Vec<Offset>] {
        &self.configs
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    #[inline]
    pub fn label(&self, k1: usize, k2: usize) -> Option<usize> {
        let l = self.labels[k1 * self.n2 + k2];
        (l >= 0).then_some(l as usize)
    }

    /// Row-major config index per location, `-1` where none applies.
    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    /// Indicator `g_j`.
    pub fn g_mask(&self, j: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l == j as i32).collect()
    }

    pub fn g_masks(&self) -> Vec<Vec<bool>> {
        (0..self.configs.len()).map(|j| self.g_mask(j)).collect()
    }

    /// Unsampled locations with no sampled neighbour inside the kernel.
    pub fn unreachable(&self) -> &[bool] {
        &self.unreachable
    }

    pub fn index_of(&self, config: &[Offset]) -> Option<usize> {
        self.configs.iter().position(|c| c.as_slice() == config)
    }
}

pub fn enumerate_local_configs(mask: &SamplingMask, support: &KernelSupport) -> LocalConfigSet {
    let (n1, n2) = (mask.n1, mask.n2);
    let mut index: HashMap<Vec<Offset>, i32> = HashMap::new();
    let mut configs = Vec::new();
    let mut labels = vec![-1; n1 * n2];
    let mut unreachable = vec![false; n1 * n2];
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            if mask.is_sampled(k1, k2) {
                continue;
            }
            let lambda = local_config(mask, support, k1, k2);
            if lambda.is_empty() {
                unreachable[k1 * n2 + k2] = true;
                continue;
            }
            let next = configs.len() as i32;
            let j = *index.entry(lambda.clone()).or_insert_with(|| {
                configs.push(lambda);
                next
            });
            labels[k1 * n2 + k2] = j;
        }
    }
    LocalConfigSet {
        n1,
        n2,
        configs,
        labels,
        unreachable,
    }
}

/// Per-sample consistency indicator over a multichannel grid: which entries
/// are measured and therefore held fixed during reconstruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsistencyMask {
    n1: usize,
    n2: usize,
    channels: usize,
    sampled: Vec<bool>,
}

impl ConsistencyMask {
    pub fn new(n1: usize, n2: usize, channels: usize, sampled: Vec<bool>) -> Result<Self> {
        if sampled.len() != n1 * n2 * channels {
            return Err(Error::Dimension(format!(
                "consistency mask of {n1}x{n2}x{channels} needs {} entries, got {}",
                n1 * n2 * channels,
                sampled.len()
            )));
        }
        Ok(Self {
            n1,
            n2,
            channels,
            sampled,
        })
    }

    /// The same spatial mask on every channel.
    pub fn uniform(mask: &SamplingMask, channels: usize) -> Self {
        let sampled = mask
            .sampled
            .iter()
            .flat_map(|&s| std::iter::repeat(s).take(channels))
            .collect();
        Self {
            n1: mask.n1,
            n2: mask.n2,
            channels,
            sampled,
        }
    }

    /// Layout of a conjugate-augmented dataset: the first `physical`
    /// channels follow `mask`, the next `physical` follow its reflection.
    pub fn conjugate_augmented(mask: &SamplingMask, physical: usize) -> Self {
        let reflected = mask.reflected();
        let nc = 2 * physical;
        let mut sampled = Vec::with_capacity(mask.n1 * mask.n2 * nc);
        for (&s, &r) in mask.sampled.iter().zip(&reflected.sampled) {
            sampled.extend(std::iter::repeat(s).take(physical));
            sampled.extend(std::iter::repeat(r).take(physical));
        }
        Self {
            n1: mask.n1,
            n2: mask.n2,
            channels: nc,
            sampled,
        }
    }

    /// Expands to a real channel stack (each complex channel becomes a
    /// Re/Im pair).
    pub fn split_real(&self) -> Self {
        Self {
            n1: self.n1,
            n2: self.n2,
            channels: 2 * self.channels,
            sampled: self.sampled.iter().flat_map(|&s| [s, s]).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n1, self.n2, self.channels)
    }

    /// Flat `[k1][k2][channel]` indicator.
    pub fn sampled(&self) -> &[bool] {
        &self.sampled
    }

    /// Sub-block over a window.
    pub fn window(&self, rows: Range<usize>, cols: Range<usize>) -> Result<Self> {
        if rows.end > self.n1 || cols.end > self.n2 {
            return Err(Error::Dimension("consistency window outside grid".into()));
        }
        let nc = self.channels;
        let mut sampled = Vec::with_capacity(rows.len() * cols.len() * nc);
        for k1 in rows.clone() {
            let base = (k1 * self.n2) * nc;
            sampled.extend_from_slice(&self.sampled[base + cols.start * nc..base + cols.end * nc]);
        }
        Self::new(rows.len(), cols.len(), nc, sampled)
    }
}

/// Family of masks drawn when synthesizing training examples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "lowercase")]
pub enum MaskStyle {
    /// Period-`accel` lines along `k2` with a random phase.
    Uniform { accel: usize },
    /// Variable-density random locations at acceleration `accel`.
    Random { accel: f64, exponent: f64 },
    /// Uniform lines restricted to a partial Fourier window of `fraction`.
    PartialFourier { fraction: f64, accel: usize },
}

impl MaskStyle {
    /// Draws one mask on an `n1 x n2` grid (no ACS region).
    pub fn draw<R: Rng>(&self, n1: usize, n2: usize, rng: &mut R) -> Result<SamplingMask> {
        let mut sampled = vec![false; n1 * n2];
        match *self {
            MaskStyle::Uniform { accel } | MaskStyle::PartialFourier { accel, .. } => {
                if accel == 0 {
                    return Err(Error::InvalidParameter("acceleration must be >= 1".into()));
                }
                let kept = match *self {
                    MaskStyle::PartialFourier { fraction, .. } => {
                        if !(fraction > 0.5 && fraction <= 1.0) {
                            return Err(Error::InvalidParameter(format!(
                                "partial Fourier fraction {fraction} must lie in (0.5, 1]"
                            )));
                        }
                        ((fraction * n2 as f64).ceil() as usize).min(n2)
                    }
                    _ => n2,
                };
                let phase = rng.gen_range(0..accel);
                for k2 in (0..kept).filter(|k2| k2 % accel == phase) {
                    for k1 in 0..n1 {
                        sampled[k1 * n2 + k2] = true;
                    }
                }
            }
            MaskStyle::Random { accel, exponent } => {
                if !(accel >= 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "acceleration {accel} must be >= 1"
                    )));
                }
                let count = (((n1 * n2) as f64 / accel).round() as usize).clamp(1, n1 * n2);
                let weights = radial_weights(n1, n2, exponent);
                let all: Vec<usize> = (0..n1 * n2).collect();
                for i in draw_weighted(rng, &weights, &all, count) {
                    sampled[i] = true;
                }
            }
        }
        SamplingMask::new(n1, n2, sampled, None)
    }
}

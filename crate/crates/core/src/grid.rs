//! Multi-channel Cartesian containers.
//!
//! Samples are stored row-major over `[k1][k2][channel]` with the channel
//! index fastest, so every grid location owns one contiguous channel slice.

use std::ops::Range;

use num_complex::Complex;
use num_traits::Zero;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGrid<E> {
    n1: usize,
    n2: usize,
    channels: usize,
    data: Vec<E>,
}

/// Complex multi-channel k-space (or image-domain) samples.
pub type KSpace<T> = ChannelGrid<Complex<T>>;

/// Real-valued channel stack: complex channels split into adjacent Re/Im pairs.
pub type RealChannelStack<T> = ChannelGrid<T>;

impl<E> ChannelGrid<E> {
    #[inline]
    pub fn n1(&self) -> usize {
        self.n1
    }

    #[inline]
    pub fn n2(&self) -> usize {
        self.n2
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n1, self.n2, self.channels)
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.n1 * self.n2
    }

    #[inline]
    pub fn index(&self, k1: usize, k2: usize, c: usize) -> usize {
        (k1 * self.n2 + k2) * self.channels + c
    }

    #[inline]
    pub fn get(&self, k1: usize, k2: usize, c: usize) -> E
    where
        E: Copy,
    {
        self.data[self.index(k1, k2, c)]
    }

    #[inline]
    pub fn set(&mut self, k1: usize, k2: usize, c: usize, value: E) {
        let i = self.index(k1, k2, c);
        self.data[i] = value;
    }

    /// Channel values at one grid location.
    #[inline]
    pub fn pixel(&self, k1: usize, k2: usize) -> &[E] {
        let start = (k1 * self.n2 + k2) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, k1: usize, k2: usize) -> &mut [E] {
        let start = (k1 * self.n2 + k2) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn same_shape<F>(&self, other: &ChannelGrid<F>) -> bool {
        self.dims() == other.dims()
    }

}

impl<E: Copy + Zero> ChannelGrid<E> {
    pub fn zeros(n1: usize, n2: usize, channels: usize) -> Self {
        Self {
            n1,
            n2,
            channels,
            data: vec![E::zero(); n1 * n2 * channels],
        }
    }

    pub fn from_vec(n1: usize, n2: usize, channels: usize, data: Vec<E>) -> Result<Self> {
        if n1 == 0 || n2 == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "grid dimensions must be positive, got {n1}x{n2}x{channels}"
            )));
        }
        if data.len() != n1 * n2 * channels {
            return Err(Error::Dimension(format!(
                "{n1}x{n2}x{channels} grid needs {} samples, got {}",
                n1 * n2 * channels,
                data.len()
            )));
        }
        Ok(Self {
            n1,
            n2,
            channels,
            data,
        })
    }

    pub fn from_fn(n1: usize, n2: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(n1 * n2 * channels);
        for k1 in 0..n1 {
            for k2 in 0..n2 {
                for c in 0..channels {
                    data.push(f(k1, k2, c));
                }
            }
        }
        Self {
            n1,
            n2,
            channels,
            data,
        }
    }

    /// One channel as a contiguous `n1 * n2` row-major plane.
    pub fn channel(&self, c: usize) -> Vec<E> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn set_channel(&mut self, c: usize, plane: &[E]) {
        assert_eq!(plane.len(), self.pixels(), "plane size");
        for (dst, &v) in self.data.iter_mut().skip(c).step_by(self.channels).zip(plane) {
            *dst = v;
        }
    }

    /// Copies a contiguous range of channels into a new grid.
    pub fn select_channels(&self, range: Range<usize>) -> Self {
        assert!(range.end <= self.channels, "channel range out of bounds");
        let nc = range.len();
        let mut data = Vec::with_capacity(self.pixels() * nc);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[range.clone()]);
        }
        Self {
            n1: self.n1,
            n2: self.n2,
            channels: nc,
            data,
        }
    }

    /// Stacks the channels of `other` after those of `self`.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if self.n1 != other.n1 || self.n2 != other.n2 {
            return Err(Error::Dimension(format!(
                "cannot stack {}x{} with {}x{}",
                self.n1, self.n2, other.n1, other.n2
            )));
        }
        let nc = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.pixels() * nc);
        for (a, b) in self
            .data
            .chunks_exact(self.channels)
            .zip(other.data.chunks_exact(other.channels))
        {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Ok(Self {
            n1: self.n1,
            n2: self.n2,
            channels: nc,
            data,
        })
    }

    /// Copies the rectangular block `rows x cols` (all channels).
    pub fn crop(&self, rows: Range<usize>, cols: Range<usize>) -> Result<Self> {
        if rows.end > self.n1 || cols.end > self.n2 || rows.is_empty() || cols.is_empty() {
            return Err(Error::Dimension(format!(
                "crop {rows:?}x{cols:?} outside {}x{} grid",
                self.n1, self.n2
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len() * self.channels);
        for k1 in rows.clone() {
            let start = self.index(k1, cols.start, 0);
            let end = self.index(k1, cols.end - 1, 0) + self.channels;
            data.extend_from_slice(&self.data[start..end]);
        }
        Ok(Self {
            n1: rows.len(),
            n2: cols.len(),
            channels: self.channels,
            data,
        })
    }

    pub fn map<F: Copy + Zero>(&self, f: impl FnMut(E) -> F) -> ChannelGrid<F> {
        ChannelGrid {
            n1: self.n1,
            n2: self.n2,
            channels: self.channels,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

impl<E> ChannelGrid<E> {
    /// Checks every sample with `finite`, reporting `what` on failure.
    pub fn ensure_finite_by(&self, what: &'static str, finite: impl Fn(&E) -> bool) -> Result<()> {
        if self.data.iter().all(finite) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }
}

impl<E: nalgebra::ComplexField + Copy> ChannelGrid<E> {
    /// Squared Frobenius norm.
    pub fn energy(&self) -> E::RealField {
        self.data
            .iter()
            .fold(E::RealField::zero(), |acc, v| acc + v.modulus_squared())
    }

    pub fn norm(&self) -> E::RealField {
        nalgebra::ComplexField::sqrt(self.energy())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        self.ensure_finite_by(what, |v| v.is_finite())
    }

    /// `<self, other> = sum self * conj(other)`.
    pub fn inner(&self, other: &Self) -> E {
        assert!(self.same_shape(other), "inner product shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(E::zero(), |acc, (&a, &b)| acc + a * b.conjugate())
    }

    pub fn scale(&mut self, factor: E::RealField) {
        for v in &mut self.data {
            *v = v.scale(factor.clone());
        }
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Self {
        assert!(self.same_shape(other), "subtraction shape mismatch");
        ChannelGrid {
            n1: self.n1,
            n2: self.n2,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        }
    }
}

impl<T: Real> ChannelGrid<Complex<T>> {
    /// Relative Frobenius distance `||self - reference|| / ||reference||`.
    pub fn relative_error(&self, reference: &Self) -> T {
        self.sub(reference).norm() / reference.norm()
    }
}

/// Nonnegative single-channel image (coil-combined magnitude).
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeImage<T> {
    n1: usize,
    n2: usize,
    data: Vec<T>,
}

impl<T: Real> MagnitudeImage<T> {
    pub fn from_vec(n1: usize, n2: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n1 * n2 || n1 == 0 || n2 == 0 {
            return Err(Error::Dimension(format!(
                "{n1}x{n2} image needs {} pixels, got {}",
                n1 * n2,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("magnitude image"));
        }
        if data.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidParameter(
                "magnitude image has negative pixels".into(),
            ));
        }
        Ok(Self { n1, n2, data })
    }

    pub fn zeros(n1: usize, n2: usize) -> Self {
        Self {
            n1,
            n2,
            data: vec![T::zero(); n1 * n2],
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
    pub fn get(&self, k1: usize, k2: usize) -> T {
        self.data[k1 * self.n2 + k2]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn max_value(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v))
    }

    /// Multiplies every pixel by a nonnegative factor.
    pub fn scaled(&self, factor: T) -> Self {
        assert!(factor >= T::zero(), "magnitude scale must be nonnegative");
        Self {
            n1: self.n1,
            n2: self.n2,
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    /// Pixelwise `|self - other|`.
    pub fn abs_diff(&self, other: &Self) -> Result<Self> {
        if self.n1 != other.n1 || self.n2 != other.n2 {
            return Err(Error::Dimension("image sizes differ".into()));
        }
        Ok(Self {
            n1: self.n1,
            n2: self.n2,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a - b).abs())
                .collect(),
        })
    }
}

//! Convolution-structured matrices, nullspace calibration and the linear
//! AC-LORAKS solver run as a Landweber iteration.

use nalgebra::{ComplexField, DMatrix, SVD};
use num_complex::Complex;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{smooth_size, Fft2};
use crate::grid::{ChannelGrid, KSpace};
use crate::kspace::{reflect_index, vcc_augment};
use crate::sampling::{ConsistencyMask, SamplingMask};
use crate::scalar::Real;
use crate::support::{KernelSupport, SupportShape};

const POWER_ITERATIONS: usize = 50;
const POWER_SEED: u64 = 0x10ad_5eed;

/// Dense convolution-structured matrix: one row per placement of the kernel
/// that fits entirely inside the grid, columns ordered `(offset, channel)`
/// with the channel fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredMatrix<E: nalgebra::Scalar> {
    n1: usize,
    n2: usize,
    channels: usize,
    matrix: DMatrix<E>,
}

impl<E: nalgebra::Scalar> StructuredMatrix<E> {
    pub fn grid_dims(&self) -> (usize, usize, usize) {
        (self.n1, self.n2, self.channels)
    }

    pub fn matrix(&self) -> &DMatrix<E> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<E> {
        self.matrix
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Row range of valid placements along one axis.
fn placements(n: usize, radius: usize) -> std::ops::Range<usize> {
    radius..n - radius
}

fn check_fits(n1: usize, n2: usize, support: &KernelSupport) -> Result<()> {
    let (r1, r2) = (support.r1(), support.r2());
    if n1 < r1 || n2 < r2 {
        return Err(Error::Dimension(format!(
            "{n1}x{n2} grid cannot hold a {r1}x{r2} kernel"
        )));
    }
    Ok(())
}

/// Builds the structured matrix: entry `(k, (m, c)) = d_c[k - m]`.
pub fn build_p<E>(d: &ChannelGrid<E>, support: &KernelSupport) -> Result<StructuredMatrix<E>>
where
    E: ComplexField + Copy,
{
    let (n1, n2, nc) = d.dims();
    check_fits(n1, n2, support)?;
    let (a, b) = support.radii();
    let (rows1, rows2) = (placements(n1, a), placements(n2, b));
    let offsets = support.offsets();
    let rows = rows1.len() * rows2.len();
    let cols = offsets.len() * nc;
    // filled row-major then transposed into nalgebra's column-major storage
    let mut data = Vec::with_capacity(rows * cols);
    for k1 in rows1.clone() {
        for k2 in rows2.clone() {
            for &(p, q) in offsets {
                data.extend_from_slice(d.pixel((k1 as isize - p) as usize, (k2 as isize - q) as usize));
            }
        }
    }
    Ok(StructuredMatrix {
        n1,
        n2,
        channels: nc,
        matrix: DMatrix::from_row_slice(rows, cols, &data),
    })
}

/// Adjoint of [`build_p`]: every matrix entry is accumulated back onto the
/// grid sample it was copied from.
pub fn apply_p_adjoint<E>(
    matrix: &DMatrix<E>,
    support: &KernelSupport,
    dims: (usize, usize),
    channels: usize,
) -> Result<ChannelGrid<E>>
where
    E: ComplexField + Copy,
{
    let (n1, n2) = dims;
    check_fits(n1, n2, support)?;
    let (a, b) = support.radii();
    let (rows1, rows2) = (placements(n1, a), placements(n2, b));
    let offsets = support.offsets();
    let rows = rows1.len() * rows2.len();
    if matrix.nrows() != rows || matrix.ncols() != offsets.len() * channels {
        return Err(Error::Dimension(format!(
            "matrix is {}x{}, support on {n1}x{n2}x{channels} needs {rows}x{}",
            matrix.nrows(),
            matrix.ncols(),
            offsets.len() * channels
        )));
    }
    let mut out = ChannelGrid::zeros(n1, n2, channels);
    let mut r = 0;
    for k1 in rows1 {
        for k2 in rows2.clone() {
            for (mi, &(p, q)) in offsets.iter().enumerate() {
                let px = out.pixel_mut((k1 as isize - p) as usize, (k2 as isize - q) as usize);
                for (c, v) in px.iter_mut().enumerate() {
                    *v += matrix[(r, mi * channels + c)];
                }
            }
            r += 1;
        }
    }
    Ok(out)
}

/// Structured matrix of the ACS block.
pub fn calibration_matrix<E>(acs: &ChannelGrid<E>, support: &KernelSupport) -> Result<StructuredMatrix<E>>
where
    E: ComplexField + Copy,
{
    build_p(acs, support)
}

/// How many nullspace vectors to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullspaceSelection {
    /// The `C` right singular vectors with the smallest singular values.
    Count(usize),
    /// Every right singular vector with `sigma <= tau * sigma_max`.
    Threshold(f64),
}

/// Orthonormal `Q x C` basis of the approximate nullspace.
#[derive(Clone, Debug, PartialEq)]
pub struct NullspaceBasis<T: Real> {
    basis: DMatrix<Complex<T>>,
}

impl<T: Real> NullspaceBasis<T> {
    pub fn new(basis: DMatrix<Complex<T>>) -> Result<Self> {
        if basis.ncols() == 0 || basis.ncols() > basis.nrows() {
            return Err(Error::InvalidParameter(format!(
                "nullspace basis must have 1..={} columns, got {}",
                basis.nrows(),
                basis.ncols()
            )));
        }
        if basis.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite("nullspace basis"));
        }
        Ok(Self { basis })
    }

    pub fn matrix(&self) -> &DMatrix<Complex<T>> {
        &self.basis
    }

    /// `Q`.
    pub fn rows(&self) -> usize {
        self.basis.nrows()
    }

    /// `C`.
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Right singular vectors of `calib` with singular values in ascending order.
///
/// Tall matrices are reduced to their `Q x Q` triangular factor first; short
/// ones are padded with zero rows so that every right singular vector exists.
pub fn right_singular_pairs<T: Real>(calib: &DMatrix<Complex<T>>) -> Result<(Vec<T>, DMatrix<Complex<T>>)> {
    let (p, q) = calib.shape();
    if p == 0 || q == 0 {
        return Err(Error::Dimension("empty calibration matrix".into()));
    }
    if calib.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("calibration matrix"));
    }
    let square = if p > q {
        calib.clone().qr().r()
    } else {
        let mut padded = DMatrix::zeros(q, q);
        padded.view_mut((0, 0), (p, q)).copy_from(calib);
        padded
    };
    let svd = SVD::try_new(square, false, true, T::lit(1e-15), 0)
        .ok_or_else(|| Error::InvalidParameter("SVD did not converge".into()))?;
    let v_t = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[i]
            .partial_cmp(&svd.singular_values[j])
            .expect("finite singular values")
    });
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut v = DMatrix::zeros(q, q);
    for (col, &i) in order.iter().enumerate() {
        for r in 0..q {
            v[(r, col)] = v_t[(i, r)].conj();
        }
    }
    Ok((values, v))
}

/// Nullspace basis plus the full ascending singular spectrum.
pub fn estimate_nullspace_with_spectrum<T: Real>(
    calib: &DMatrix<Complex<T>>,
    selection: NullspaceSelection,
) -> Result<(NullspaceBasis<T>, Vec<T>)> {
    let q = calib.ncols();
    if let NullspaceSelection::Count(c) = selection {
        if c == 0 || c >= q {
            return Err(Error::InvalidParameter(format!(
                "nullspace dimension {c} must lie in 1..{q}"
            )));
        }
    }
    if let NullspaceSelection::Threshold(tau) = selection {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "energy threshold {tau} must lie in (0, 1)"
            )));
        }
    }
    let (values, v) = right_singular_pairs(calib)?;
    let c = match selection {
        NullspaceSelection::Count(c) => c,
        NullspaceSelection::Threshold(tau) => {
            let cutoff = values[q - 1] * T::lit(tau);
            let c = values.iter().filter(|&&s| s <= cutoff).count();
            if c == 0 {
                return Err(Error::InvalidParameter(format!(
                    "no singular value below {tau} of the maximum"
                )));
            }
            c
        }
    };
    let basis = v.columns(0, c).into_owned();
    Ok((NullspaceBasis::new(basis)?, values))
}

pub fn estimate_nullspace<T: Real>(
    calib: &StructuredMatrix<Complex<T>>,
    selection: NullspaceSelection,
) -> Result<NullspaceBasis<T>> {
    estimate_nullspace_with_spectrum(calib.matrix(), selection).map(|(n, _)| n)
}

/// The normal operator `x -> P*(P(x) N N^H)` of the nullspace penalty.
pub trait NormalOperator<T: Real> {
    /// `(n1, n2, channels)` of the operand.
    fn dims(&self) -> (usize, usize, usize);

    /// Writes `A x` into `out`.
    fn apply(&mut self, x: &KSpace<T>, out: &mut KSpace<T>);
}

fn basis_rows<T: Real>(n: &NullspaceBasis<T>) -> Vec<Complex<T>> {
    let (q, c) = n.matrix().shape();
    let mut rows = Vec::with_capacity(q * c);
    for r in 0..q {
        for j in 0..c {
            rows.push(n.matrix()[(r, j)]);
        }
    }
    rows
}

fn check_basis<T: Real>(support: &KernelSupport, channels: usize, n: &NullspaceBasis<T>) -> Result<()> {
    if n.rows() != support.len() * channels {
        return Err(Error::Dimension(format!(
            "nullspace has {} rows, support with {channels} channels needs {}",
            n.rows(),
            support.len() * channels
        )));
    }
    Ok(())
}

/// Evaluates the operator exactly, placement by placement, over the valid
/// kernel positions of the grid.
pub struct DirectOperator<T: Real> {
    dims: (usize, usize, usize),
    support: KernelSupport,
    /// Row-major `Q x C`.
    basis: Vec<Complex<T>>,
    c: usize,
}

impl<T: Real> DirectOperator<T> {
    pub fn new(dims: (usize, usize, usize), support: &KernelSupport, n: &NullspaceBasis<T>) -> Result<Self> {
        check_fits(dims.0, dims.1, support)?;
        check_basis(support, dims.2, n)?;
        Ok(Self {
            dims,
            support: support.clone(),
            basis: basis_rows(n),
            c: n.dim(),
        })
    }
}

impl<T: Real> NormalOperator<T> for DirectOperator<T> {
    fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn apply(&mut self, x: &KSpace<T>, out: &mut KSpace<T>) {
        let (n1, n2, nc) = self.dims;
        assert_eq!(x.dims(), self.dims, "operand shape");
        assert_eq!(out.dims(), self.dims, "output shape");
        out.data_mut().fill(Complex::zero());
        let (a, b) = self.support.radii();
        let offsets = self.support.offsets();
        let c = self.c;
        let mut z = vec![Complex::<T>::zero(); c];
        for k1 in placements(n1, a) {
            for k2 in placements(n2, b) {
                z.fill(Complex::zero());
                for (mi, &(p, q)) in offsets.iter().enumerate() {
                    let src = x.pixel((k1 as isize - p) as usize, (k2 as isize - q) as usize);
                    for (ch, &v) in src.iter().enumerate() {
                        let row = &self.basis[(mi * nc + ch) * c..(mi * nc + ch + 1) * c];
                        for (zj, &nv) in z.iter_mut().zip(row) {
                            *zj += v * nv;
                        }
                    }
                }
                for (mi, &(p, q)) in offsets.iter().enumerate() {
                    let dst = out.pixel_mut((k1 as isize - p) as usize, (k2 as isize - q) as usize);
                    for (ch, d) in dst.iter_mut().enumerate() {
                        let row = &self.basis[(mi * nc + ch) * c..(mi * nc + ch + 1) * c];
                        let mut acc = Complex::zero();
                        for (&zj, &nv) in z.iter().zip(row) {
                            acc += zj * nv.conj();
                        }
                        *d += acc;
                    }
                }
            }
        }
    }
}

/// Evaluates the operator as a multichannel convolution with FFTs.
///
/// Every kernel placement that overlaps the grid contributes, with samples
/// outside the grid taken as zero. This equals the exact operator on the
/// grid zero-padded by twice the kernel radius on each side (restricted back
/// to the original samples), and removes the boundary down-weighting of the
/// valid-placement form.
pub struct ConvolutionOperator<T: Real> {
    dims: (usize, usize, usize),
    fft_dims: (usize, usize),
    fft: Fft2<T>,
    /// `kernels[out * L + in]`: transfer function from channel `in` to `out`.
    kernels: Vec<Vec<Complex<T>>>,
    planes: Vec<Vec<Complex<T>>>,
    acc: Vec<Complex<T>>,
}

impl<T: Real> ConvolutionOperator<T> {
    pub fn new(dims: (usize, usize, usize), support: &KernelSupport, n: &NullspaceBasis<T>) -> Result<Self> {
        let (n1, n2, nc) = dims;
        check_basis(support, nc, n)?;
        let (a, b) = support.radii();
        let (f1, f2) = (smooth_size(n1 + 2 * a), smooth_size(n2 + 2 * b));
        let offsets = support.offsets();
        let cdim = n.dim();
        let rows = basis_rows(n);
        let q = offsets.len() * nc;
        // H = N N^H, then K_{out,in}[delta] = sum_{m' - m = delta} H[(m, in), (m', out)]
        let mut h = vec![Complex::<T>::zero(); q * q];
        for r in 0..q {
            for s in 0..q {
                let (x, y) = (&rows[r * cdim..(r + 1) * cdim], &rows[s * cdim..(s + 1) * cdim]);
                h[r * q + s] = x.iter().zip(y).fold(Complex::zero(), |acc, (&u, &v)| acc + u * v.conj());
            }
        }
        let mut kernels = vec![vec![Complex::<T>::zero(); f1 * f2]; nc * nc];
        for (mi, &(p, qq)) in offsets.iter().enumerate() {
            for (mj, &(pp, qp)) in offsets.iter().enumerate() {
                let (d1, d2) = (pp - p, qp - qq);
                // circular position of -delta, so that a plain convolution
                // realizes the correlation sum over x[s + delta]
                let i1 = (-d1).rem_euclid(f1 as isize) as usize;
                let i2 = (-d2).rem_euclid(f2 as isize) as usize;
                for cin in 0..nc {
                    for cout in 0..nc {
                        kernels[cout * nc + cin][i1 * f2 + i2] += h[(mi * nc + cin) * q + mj * nc + cout];
                    }
                }
            }
        }
        let mut fft = Fft2::new(f1, f2);
        let scale = T::one() / T::from_count(f1 * f2);
        for k in &mut kernels {
            fft.forward(k);
            for v in k.iter_mut() {
                *v = v.scale(scale);
            }
        }
        Ok(Self {
            dims,
            fft_dims: (f1, f2),
            fft,
            kernels,
            planes: vec![vec![Complex::zero(); f1 * f2]; nc],
            acc: vec![Complex::zero(); f1 * f2],
        })
    }
}

impl<T: Real> NormalOperator<T> for ConvolutionOperator<T> {
    fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn apply(&mut self, x: &KSpace<T>, out: &mut KSpace<T>) {
        let (n1, n2, nc) = self.dims;
        let (_, f2) = self.fft_dims;
        assert_eq!(x.dims(), self.dims, "operand shape");
        assert_eq!(out.dims(), self.dims, "output shape");
        for (c, plane) in self.planes.iter_mut().enumerate() {
            plane.fill(Complex::zero());
            for k1 in 0..n1 {
                for k2 in 0..n2 {
                    plane[k1 * f2 + k2] = x.get(k1, k2, c);
                }
            }
            self.fft.forward(plane);
        }
        for cout in 0..nc {
            self.acc.fill(Complex::zero());
            for (cin, plane) in self.planes.iter().enumerate() {
                for ((a, &k), &v) in self.acc.iter_mut().zip(&self.kernels[cout * nc + cin]).zip(plane) {
                    *a += k * v;
                }
            }
            self.fft.inverse(&mut self.acc);
            for k1 in 0..n1 {
                for k2 in 0..n2 {
                    out.set(k1, k2, cout, self.acc[k1 * f2 + k2]);
                }
            }
        }
    }
}

/// Largest eigenvalue of the (positive semidefinite) normal operator by power
/// iteration from a fixed pseudo-random start.
pub fn operator_norm_estimate<T: Real>(op: &mut dyn NormalOperator<T>) -> T {
    let (n1, n2, nc) = op.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut x = KSpace::from_fn(n1, n2, nc, |_, _, _| {
        Complex::new(T::lit(rng.gen_range(-1.0..1.0)), T::lit(rng.gen_range(-1.0..1.0)))
    });
    let mut y = KSpace::zeros(n1, n2, nc);
    let mut estimate = T::zero();
    for _ in 0..POWER_ITERATIONS {
        let norm = x.norm();
        if norm == T::zero() {
            break;
        }
        x.scale(T::one() / norm);
        op.apply(&x, &mut y);
        estimate = y.inner(&x).re;
        std::mem::swap(&mut x, &mut y);
    }
    estimate
}

/// Step `1 / sigma_max^2` for the exact operator built from `dims`, the
/// support and the nullspace basis.
pub fn estimate_step_size<T: Real>(
    dims: (usize, usize, usize),
    support: &KernelSupport,
    n: &NullspaceBasis<T>,
) -> Result<T> {
    let mut op = DirectOperator::new(dims, support, n)?;
    step_from_operator(&mut op)
}

pub fn step_from_operator<T: Real>(op: &mut dyn NormalOperator<T>) -> Result<T> {
    let sigma2 = operator_norm_estimate(op);
    if !(sigma2 > T::zero()) || !sigma2.is_finite() {
        return Err(Error::InvalidParameter(
            "normal operator has no positive spectrum".into(),
        ));
    }
    Ok(T::one() / sigma2)
}

/// Landweber run summary.
#[derive(Clone, Debug)]
pub struct LandweberOutcome<T: Real> {
    pub solution: KSpace<T>,
    /// `||P(d) N||^2` before each update.
    pub objective: Vec<T>,
    pub iterations: usize,
}

/// Stopping rules for [`landweber`].
#[derive(Clone, Copy, Debug)]
pub struct LandweberControl {
    pub max_iterations: usize,
    /// Stop once `||d_{i+1} - d_i|| <= tolerance * ||d_i||`; zero disables.
    pub tolerance: f64,
}

/// Iterates `d <- U(d - step * A d) + d_zp` from `d_zp`.
pub fn landweber<T: Real>(
    op: &mut dyn NormalOperator<T>,
    d_zp: &KSpace<T>,
    consistency: &ConsistencyMask,
    step: T,
    control: LandweberControl,
) -> Result<LandweberOutcome<T>> {
    if d_zp.dims() != op.dims() || consistency.dims() != op.dims() {
        return Err(Error::Dimension("operator, data and mask shapes differ".into()));
    }
    if control.max_iterations == 0 {
        return Err(Error::InvalidParameter("at least one iteration required".into()));
    }
    if !(step > T::zero()) {
        return Err(Error::InvalidParameter("step size must be positive".into()));
    }
    d_zp.ensure_finite("zero-filled data")?;
    let (n1, n2, nc) = op.dims();
    let mut d = d_zp.clone();
    let mut grad = KSpace::zeros(n1, n2, nc);
    let mut objective = Vec::with_capacity(control.max_iterations + 1);
    let mut growth = 0;
    let tol = T::lit(control.tolerance);
    let mut iterations = 0;
    for it in 0..control.max_iterations {
        op.apply(&d, &mut grad);
        let f = d.inner(&grad).re;
        if !f.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        if let Some(&prev) = objective.last() {
            let slack = T::lit(1e-9) * prev + T::lit(1e-12) * objective[0];
            if f > prev + slack {
                growth += 1;
                if growth >= 3 {
                    return Err(Error::Diverged { iteration: it });
                }
            } else {
                growth = 0;
            }
        }
        objective.push(f);
        let mut change = T::zero();
        for ((v, &g), &fixed) in d.data_mut().iter_mut().zip(grad.data()).zip(consistency.sampled()) {
            if !fixed {
                let delta = g.scale(step);
                change += delta.norm_sqr();
                *v -= delta;
            }
        }
        iterations = it + 1;
        if tol > T::zero() && change.sqrt() <= tol * d.norm() {
            break;
        }
    }
    op.apply(&d, &mut grad);
    objective.push(d.inner(&grad).re);
    Ok(LandweberOutcome {
        solution: d,
        objective,
        iterations,
    })
}

/// Plain AC-LORAKS Landweber solve with the exact valid-placement operator.
pub fn ac_loraks_landweber<T: Real>(
    d_zp: &KSpace<T>,
    consistency: &ConsistencyMask,
    n: &NullspaceBasis<T>,
    support: &KernelSupport,
    step: T,
    iterations: usize,
) -> Result<KSpace<T>> {
    let mut op = DirectOperator::new(d_zp.dims(), support, n)?;
    let control = LandweberControl {
        max_iterations: iterations,
        tolerance: 0.0,
    };
    landweber(&mut op, d_zp, consistency, step, control).map(|o| o.solution)
}

/// Which realization of the normal operator the full solver uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    /// Valid placements only.
    Direct,
    /// FFT convolution over every overlapping placement.
    Convolution,
}

/// End-to-end AC-LORAKS settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcLoraksSettings {
    pub kernel_r1: usize,
    pub kernel_r2: usize,
    pub shape: SupportShape,
    pub nullspace: NullspaceSelection,
    /// Append virtual conjugate coils before building the structured matrix.
    pub conjugate_coils: bool,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub operator: OperatorKind,
}

impl Default for AcLoraksSettings {
    fn default() -> Self {
        Self {
            kernel_r1: 7,
            kernel_r2: 7,
            shape: SupportShape::Ellipsoidal,
            nullspace: NullspaceSelection::Threshold(0.05),
            conjugate_coils: true,
            max_iterations: 500,
            tolerance: 1e-6,
            operator: OperatorKind::Convolution,
        }
    }
}

impl AcLoraksSettings {
    pub fn support(&self) -> Result<KernelSupport> {
        KernelSupport::new(self.kernel_r1, self.kernel_r2, self.shape)
    }
}

/// Calibration block of the mask's ACS region, shrunk so that it is closed
/// under reflection through DC (needed when virtual conjugate coils are
/// formed from it).
pub fn symmetric_acs_block(mask: &SamplingMask) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let r = mask
        .acs()
        .ok_or_else(|| Error::InvalidParameter("mask has no ACS region".into()))?;
    let shrink = |range: &std::ops::Range<usize>, n: usize| {
        let kept: Vec<usize> = range
            .clone()
            .filter(|&i| range.contains(&reflect_index(i, n)))
            .collect();
        match (kept.first(), kept.last()) {
            (Some(&lo), Some(&hi)) => Ok(lo..hi + 1),
            _ => Err(Error::InvalidParameter("ACS region has no symmetric core".into())),
        }
    };
    Ok((shrink(&r.k1, mask.n1())?, shrink(&r.k2, mask.n2())?))
}

/// Structured data prepared for AC-LORAKS: the (possibly augmented)
/// zero-filled data, its consistency mask and the calibration matrix.
pub struct AcLoraksProblem<T: Real> {
    pub data: KSpace<T>,
    pub consistency: ConsistencyMask,
    pub calibration: StructuredMatrix<Complex<T>>,
    pub support: KernelSupport,
    pub physical_channels: usize,
}

pub fn prepare_ac_loraks<T: Real>(
    d_zp: &KSpace<T>,
    mask: &SamplingMask,
    settings: &AcLoraksSettings,
) -> Result<AcLoraksProblem<T>> {
    let support = settings.support()?;
    let nc = d_zp.channels();
    let (data, consistency, block) = if settings.conjugate_coils {
        (
            vcc_augment(d_zp),
            ConsistencyMask::conjugate_augmented(mask, nc),
            symmetric_acs_block(mask)?,
        )
    } else {
        let r = mask
            .acs()
            .ok_or_else(|| Error::InvalidParameter("mask has no ACS region".into()))?;
        (d_zp.clone(), ConsistencyMask::uniform(mask, nc), (r.k1.clone(), r.k2.clone()))
    };
    let acs = data.crop(block.0, block.1)?;
    let calibration = calibration_matrix(&acs, &support)?;
    Ok(AcLoraksProblem {
        data,
        consistency,
        calibration,
        support,
        physical_channels: nc,
    })
}

/// Solves one AC-LORAKS problem for a given nullspace.
pub fn solve_ac_loraks<T: Real>(
    problem: &AcLoraksProblem<T>,
    n: &NullspaceBasis<T>,
    settings: &AcLoraksSettings,
) -> Result<LandweberOutcome<T>> {
    let dims = problem.data.dims();
    let mut op: Box<dyn NormalOperator<T>> = match settings.operator {
        OperatorKind::Direct => Box::new(DirectOperator::new(dims, &problem.support, n)?),
        OperatorKind::Convolution => Box::new(ConvolutionOperator::new(dims, &problem.support, n)?),
    };
    let step = step_from_operator(op.as_mut())?;
    let control = LandweberControl {
        max_iterations: settings.max_iterations,
        tolerance: settings.tolerance,
    };
    let mut outcome = landweber(op.as_mut(), &problem.data, &problem.consistency, step, control)?;
    outcome.solution = outcome.solution.select_channels(0..problem.physical_channels);
    Ok(outcome)
}

/// Calibrates on the ACS region of `mask` and reconstructs the physical
/// channels.
pub fn ac_loraks_reconstruct<T: Real>(
    d_zp: &KSpace<T>,
    mask: &SamplingMask,
    settings: &AcLoraksSettings,
) -> Result<KSpace<T>> {
    let problem = prepare_ac_loraks(d_zp, mask, settings)?;
    let n = estimate_nullspace(&problem.calibration, settings.nullspace)?;
    solve_ac_loraks(&problem, &n, settings).map(|o| o.solution)
}

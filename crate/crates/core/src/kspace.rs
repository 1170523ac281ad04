//! Fourier transforms, complex/real channel mapping, virtual conjugate coils,
//! coil compression and coil combination.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::grid::{KSpace, MagnitudeImage, RealChannelStack};
use crate::scalar::Real;

/// Unitary 2D DFT of every channel with the DC sample at `(n1/2, n2/2)`.
pub fn fft2_centered<T: Real>(image: &KSpace<T>) -> Result<KSpace<T>> {
    transform_channels(image, true)
}

/// Inverse of [`fft2_centered`].
pub fn ifft2_centered<T: Real>(kspace: &KSpace<T>) -> Result<KSpace<T>> {
    transform_channels(kspace, false)
}

fn transform_channels<T: Real>(x: &KSpace<T>, forward: bool) -> Result<KSpace<T>> {
    x.ensure_finite("FFT input")?;
    let (n1, n2, nc) = x.dims();
    let mut plan = Fft2::new(n1, n2);
    let mut out = x.clone();
    for c in 0..nc {
        let mut plane = x.channel(c);
        if forward {
            plan.forward_centered(&mut plane);
        } else {
            plan.inverse_centered(&mut plane);
        }
        out.set_channel(c, &plane);
    }
    Ok(out)
}

/// Splits `L` complex channels into `2L` real ones: channel `2l` holds the
/// real part of coil `l` and channel `2l + 1` the imaginary part.
pub fn split_complex_to_real<T: Real>(kspace: &KSpace<T>) -> RealChannelStack<T> {
    let (n1, n2, nc) = kspace.dims();
    let data = kspace.data().iter().flat_map(|v| [v.re, v.im]).collect();
    RealChannelStack::from_vec(n1, n2, 2 * nc, data).expect("shape preserved")
}

/// Inverse of [`split_complex_to_real`].
pub fn merge_real_to_complex<T: Real>(stack: &RealChannelStack<T>) -> Result<KSpace<T>> {
    let (n1, n2, nc) = stack.dims();
    if nc % 2 != 0 {
        return Err(Error::Dimension(format!(
            "real stack must have an even channel count, got {nc}"
        )));
    }
    let data = stack
        .data()
        .chunks_exact(2)
        .map(|p| Complex::new(p[0], p[1]))
        .collect();
    KSpace::from_vec(n1, n2, nc / 2, data)
}

/// Index of `-k` on a DC-centered axis of length `n` (DC at `n/2`).
///
/// For even `n` this is `(n - i) mod n`, which maps the unpaired Nyquist
/// sample (index 0) onto itself.
#[inline]
pub fn reflect_index(i: usize, n: usize) -> usize {
    (2 * (n / 2) + n - i) % n
}

/// Appends `L` virtual conjugate coils: channel `L + l` at `k` holds
/// `conj(d_l[-k])`.
pub fn vcc_augment<T: Real>(kspace: &KSpace<T>) -> KSpace<T> {
    let (n1, n2, nc) = kspace.dims();
    KSpace::from_fn(n1, n2, 2 * nc, |k1, k2, c| {
        if c < nc {
            kspace.get(k1, k2, c)
        } else {
            kspace
                .get(reflect_index(k1, n1), reflect_index(k2, n2), c - nc)
                .conj()
        }
    })
}

/// Compresses `L` coils to `target` virtual coils by projecting the channel
/// vectors onto the dominant left singular vectors of the `L x (n1 n2)` data
/// matrix.
pub fn coil_compress<T: Real>(kspace: &KSpace<T>, target: usize) -> Result<KSpace<T>> {
    let matrix = coil_compression_matrix(kspace, target)?;
    let (n1, n2, nc) = kspace.dims();
    let mut out = KSpace::zeros(n1, n2, target);
    for (src, dst) in kspace
        .data()
        .chunks_exact(nc)
        .zip(out.data_mut().chunks_exact_mut(target))
    {
        for (t, d) in dst.iter_mut().enumerate() {
            // row t of U^H
            *d = src
                .iter()
                .enumerate()
                .fold(Complex::default(), |acc, (c, &v)| acc + matrix[(c, t)].conj() * v);
        }
    }
    Ok(out)
}

/// The `L x target` matrix of dominant left singular vectors used by
/// [`coil_compress`], obtained from the eigendecomposition of the coil
/// covariance.
pub fn coil_compression_matrix<T: Real>(kspace: &KSpace<T>, target: usize) -> Result<DMatrix<Complex<T>>> {
    let nc = kspace.channels();
    if target == 0 || target > nc {
        return Err(Error::InvalidParameter(format!(
            "compression target {target} must lie in 1..={nc}"
        )));
    }
    kspace.ensure_finite("coil compression input")?;
    let mut cov = DMatrix::<Complex<T>>::zeros(nc, nc);
    for px in kspace.data().chunks_exact(nc) {
        for a in 0..nc {
            for b in 0..nc {
                cov[(a, b)] += px[a] * px[b].conj();
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..nc).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("finite eigenvalues")
    });
    let mut u = DMatrix::zeros(nc, target);
    for (t, &i) in order.iter().take(target).enumerate() {
        u.set_column(t, &eig.eigenvectors.column(i));
    }
    Ok(u)
}

/// Root-sum-of-squares coil combination of the inverse-FFT images.
pub fn rss_image<T: Real>(kspace: &KSpace<T>) -> Result<MagnitudeImage<T>> {
    let img = ifft2_centered(kspace)?;
    let data = img
        .data()
        .chunks_exact(img.channels())
        .map(|px| px.iter().fold(T::zero(), |acc, v| acc + v.norm_sqr()).sqrt())
        .collect();
    MagnitudeImage::from_vec(img.n1(), img.n2(), data)
}

//! Image-quality measures: NRMSE, SSIM and the radially binned error
//! spectrum of k-space errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{KSpace, MagnitudeImage};
use crate::kspace::{fft2_centered, rss_image};
use crate::scalar::Real;

fn same_dims<T: Real>(a: &MagnitudeImage<T>, b: &MagnitudeImage<T>) -> Result<()> {
    if (a.n1(), a.n2()) != (b.n1(), b.n2()) {
        return Err(Error::Dimension(format!(
            "images are {}x{} and {}x{}",
            a.n1(),
            a.n2(),
            b.n1(),
            b.n2()
        )));
    }
    Ok(())
}

/// `||recon - gold|| / ||gold||`.
pub fn nrmse<T: Real>(recon: &MagnitudeImage<T>, gold: &MagnitudeImage<T>) -> Result<T> {
    same_dims(recon, gold)?;
    let (mut err, mut norm) = (T::zero(), T::zero());
    for (&r, &g) in recon.data().iter().zip(gold.data()) {
        err += (r - g) * (r - g);
        norm += g * g;
    }
    if norm == T::zero() {
        return Err(Error::InvalidParameter("reference image is all zero".into()));
    }
    Ok((err / norm).sqrt())
}

/// Scales both images by the maximum of `gold`, putting the reference in `[0, 1]`.
pub fn normalize_pair<T: Real>(
    recon: &MagnitudeImage<T>,
    gold: &MagnitudeImage<T>,
) -> Result<(MagnitudeImage<T>, MagnitudeImage<T>)> {
    same_dims(recon, gold)?;
    let peak = gold.max_value();
    if peak == T::zero() {
        return Err(Error::InvalidParameter("reference image is all zero".into()));
    }
    let s = T::one() / peak;
    Ok((recon.scaled(s), gold.scaled(s)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    /// Side of the square Gaussian window (odd).
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    fn weights<T: Real>(&self) -> Vec<T> {
        let h = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - h).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| T::lit(w / total)).collect()
    }

    fn constants<T: Real>(&self) -> (T, T) {
        (
            T::lit((self.k1 * self.dynamic_range).powi(2)),
            T::lit((self.k2 * self.dynamic_range).powi(2)),
        )
    }

    fn check<T: Real>(&self, img: &MagnitudeImage<T>) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::InvalidParameter("SSIM window must be odd".into()));
        }
        if img.n1() < self.window || img.n2() < self.window {
            return Err(Error::Dimension(format!(
                "image {}x{} is smaller than the {} SSIM window",
                img.n1(),
                img.n2(),
                self.window
            )));
        }
        Ok(())
    }
}

#[inline]
fn ssim_value<T: Real>(mx: T, my: T, xx: T, yy: T, xy: T, c1: T, c2: T) -> T {
    let two = T::lit(2.0);
    let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
    ((two * (mx * my) + c1) * (two * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean structural similarity with the default Gaussian window, over the
/// positions where the window lies fully inside the image. Both images are
/// expected on the reference's `[0, 1]` scale (see [`normalize_pair`]).
pub fn ssim<T: Real>(recon: &MagnitudeImage<T>, gold: &MagnitudeImage<T>) -> Result<T> {
    ssim_with(recon, gold, &SsimParams::default())
}

/// [`ssim`] with explicit parameters, by separable filtering.
pub fn ssim_with<T: Real>(recon: &MagnitudeImage<T>, gold: &MagnitudeImage<T>, p: &SsimParams) -> Result<T> {
    same_dims(recon, gold)?;
    p.check(gold)?;
    let w = p.weights::<T>();
    let (n1, n2, win) = (gold.n1(), gold.n2(), p.window);
    let (o1, o2) = (n1 - win + 1, n2 - win + 1);
    // valid-mode separable filtering: rows first, then columns
    let filter = |f: &dyn Fn(usize) -> T| -> Vec<T> {
        let mut rows = vec![T::zero(); n1 * o2];
        for i in 0..n1 {
            for j in 0..o2 {
                let mut acc = T::zero();
                for (t, &wt) in w.iter().enumerate() {
                    acc += wt * f(i * n2 + j + t);
                }
                rows[i * o2 + j] = acc;
            }
        }
        let mut out = vec![T::zero(); o1 * o2];
        for i in 0..o1 {
            for j in 0..o2 {
                let mut acc = T::zero();
                for (t, &wt) in w.iter().enumerate() {
                    acc += wt * rows[(i + t) * o2 + j];
                }
                out[i * o2 + j] = acc;
            }
        }
        out
    };
    let (x, y) = (recon.data(), gold.data());
    let mx = filter(&|k| x[k]);
    let my = filter(&|k| y[k]);
    let xx = filter(&|k| x[k] * x[k]);
    let yy = filter(&|k| y[k] * y[k]);
    let xy = filter(&|k| x[k] * y[k]);
    let (c1, c2) = p.constants::<T>();
    let mut total = T::zero();
    for k in 0..o1 * o2 {
        total += ssim_value(mx[k], my[k], xx[k], yy[k], xy[k], c1, c2);
    }
    Ok(total / T::from_count(o1 * o2))
}

/// Straightforward sliding-window evaluation of [`ssim_with`] with the full
/// 2D window at every position; slow, kept as a cross-check.
pub fn ssim_direct<T: Real>(recon: &MagnitudeImage<T>, gold: &MagnitudeImage<T>, p: &SsimParams) -> Result<T> {
    same_dims(recon, gold)?;
    p.check(gold)?;
    let w = p.weights::<T>();
    let win = p.window;
    let (o1, o2) = (gold.n1() - win + 1, gold.n2() - win + 1);
    let (c1, c2) = p.constants::<T>();
    let mut total = T::zero();
    for i in 0..o1 {
        for j in 0..o2 {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
            for a in 0..win {
                for b in 0..win {
                    let wt = w[a] * w[b];
                    let (u, v) = (recon.get(i + a, j + b), gold.get(i + a, j + b));
                    mx += wt * u;
                    my += wt * v;
                    xx += wt * u * u;
                    yy += wt * v * v;
                    xy += wt * u * v;
                }
            }
            total += ssim_value(mx, my, xx, yy, xy, c1, c2);
        }
    }
    Ok(total / T::from_count(o1 * o2))
}

/// One annulus of an error spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EspBin {
    /// Centre of the annulus in cycles per sample.
    pub center: f64,
    /// `||error|| / ||gold||` over the annulus.
    pub ratio: f64,
}

/// Normalised radius of every k-space location, `sqrt((dk1/n1)^2 + (dk2/n2)^2)`.
fn radii(n1: usize, n2: usize) -> Vec<f64> {
    let (c1, c2) = ((n1 / 2) as f64, (n2 / 2) as f64);
    let mut r = Vec::with_capacity(n1 * n2);
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            let (a, b) = ((k1 as f64 - c1) / n1 as f64, (k2 as f64 - c2) / n2 as f64);
            r.push((a * a + b * b).sqrt());
        }
    }
    r
}

/// Error energy relative to reference energy in `n_bins` equal-width
/// annuli of spatial frequency covering `[0, r_max]`. Annuli holding no
/// samples or no reference energy are omitted.
pub fn error_spectrum<T: Real>(recon: &KSpace<T>, gold: &KSpace<T>, n_bins: usize) -> Result<Vec<EspBin>> {
    if recon.dims() != gold.dims() {
        return Err(Error::Dimension("k-space sizes differ".into()));
    }
    if n_bins < 4 {
        return Err(Error::InvalidParameter(format!("need at least 4 bins, got {n_bins}")));
    }
    let (n1, n2, nc) = gold.dims();
    let r = radii(n1, n2);
    let r_max = r.iter().cloned().fold(0.0, f64::max);
    let width = if r_max > 0.0 { r_max / n_bins as f64 } else { 1.0 };
    let mut err = vec![0.0f64; n_bins];
    let mut refe = vec![0.0f64; n_bins];
    let mut count = vec![0usize; n_bins];
    for (k, &rk) in r.iter().enumerate() {
        let b = ((rk / width) as usize).min(n_bins - 1);
        count[b] += 1;
        for c in 0..nc {
            let (x, g) = (recon.data()[k * nc + c], gold.data()[k * nc + c]);
            err[b] += (x - g).norm_sqr().as_f64();
            refe[b] += g.norm_sqr().as_f64();
        }
    }
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0 && refe[b] > 0.0)
        .map(|b| EspBin {
            center: (b as f64 + 0.5) * width,
            ratio: (err[b] / refe[b]).sqrt(),
        })
        .collect())
}

/// [`error_spectrum`] of two magnitude images, through their spectra.
pub fn image_error_spectrum<T: Real>(
    recon: &MagnitudeImage<T>,
    gold: &MagnitudeImage<T>,
    n_bins: usize,
) -> Result<Vec<EspBin>> {
    same_dims(recon, gold)?;
    let lift = |m: &MagnitudeImage<T>| {
        KSpace::from_fn(m.n1(), m.n2(), 1, |i, j, _| num_complex::Complex::new(m.get(i, j), T::zero()))
    };
    error_spectrum(&fft2_centered(&lift(recon))?, &fft2_centered(&lift(gold))?, n_bins)
}

/// Default number of annuli in reported error spectra.
pub const DEFAULT_ESP_BINS: usize = 16;

/// Quality summary of one reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub method: String,
    pub nrmse: f64,
    pub ssim: f64,
    pub esp: Vec<EspBin>,
    pub runtime_seconds: f64,
    /// Serialized settings of the method.
    pub config: String,
}

/// NRMSE and SSIM of the root-sum-of-squares images (reference scaled to
/// `[0, 1]`) and the k-space error spectrum.
pub fn evaluate<T: Real>(
    method: &str,
    recon: &KSpace<T>,
    gold: &KSpace<T>,
    runtime_seconds: f64,
    config: String,
) -> Result<ReconReport> {
    let (ri, gi) = (rss_image(recon)?, rss_image(gold)?);
    let (rn, gn) = normalize_pair(&ri, &gi)?;
    Ok(ReconReport {
        method: method.to_string(),
        nrmse: nrmse(&ri, &gi)?.as_f64(),
        ssim: ssim(&rn, &gn)?.as_f64(),
        esp: error_spectrum(recon, gold, DEFAULT_ESP_BINS)?,
        runtime_seconds,
        config,
    })
}

#[cfg(test)]
mod tests {
    use num_complex::Complex;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_image(n1: usize, n2: usize, seed: u64) -> MagnitudeImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MagnitudeImage::from_vec(n1, n2, (0..n1 * n2).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn rand_kspace(n1: usize, n2: usize, c: usize, seed: u64) -> KSpace<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KSpace::from_fn(n1, n2, c, |_, _, _| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn nrmse_examples() {
        let g = rand_image(12, 10, 1);
        assert_eq!(nrmse(&g, &g).unwrap(), 0.0);
        assert!((nrmse(&g.scaled(2.0), &g).unwrap() - 1.0).abs() < 1e-15);
        let mut bumped = g.data().to_vec();
        bumped[7] += 1.0;
        let b = MagnitudeImage::from_vec(12, 10, bumped).unwrap();
        let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nrmse(&b, &g).unwrap() - 1.0 / norm).abs() < 1e-15);
        assert!(nrmse(&g, &MagnitudeImage::zeros(12, 10)).is_err());
        assert!(nrmse(&g, &rand_image(10, 12, 0)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let g = rand_image(24, 20, 2);
        assert_eq!(ssim(&g, &g).unwrap(), 1.0);
        let zero = MagnitudeImage::zeros(24, 20);
        let s = ssim(&zero, &g).unwrap();
        assert!((0.0..1.0).contains(&s), "{s}");
        assert!(ssim(&rand_image(8, 20, 0), &rand_image(8, 20, 1)).is_err());
        assert!(ssim(&g, &rand_image(20, 24, 0)).is_err());
    }

    #[test]
    fn ssim_agrees_with_direct_window() {
        for seed in 0..4 {
            let g = rand_image(30, 26, seed);
            let r = rand_image(30, 26, seed + 100);
            let p = SsimParams::default();
            let (a, b) = (ssim_with(&r, &g, &p).unwrap(), ssim_direct(&r, &g, &p).unwrap());
            assert!((a - b).abs() < 1e-8, "{a} {b}");
        }
    }

    #[test]
    fn ssim_invariant_under_joint_renormalisation() {
        let g = rand_image(20, 20, 5);
        let r = rand_image(20, 20, 6);
        let (rn, gn) = normalize_pair(&r, &g).unwrap();
        let (rs, gs) = normalize_pair(&r.scaled(3.5), &g.scaled(3.5)).unwrap();
        assert!((ssim(&rn, &gn).unwrap() - ssim(&rs, &gs).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn esp_examples() {
        let g = rand_kspace(16, 20, 2, 3);
        let same = error_spectrum(&g, &g, 8).unwrap();
        assert!(!same.is_empty() && same.iter().all(|b| b.ratio == 0.0));
        let zero = KSpace::zeros(16, 20, 2);
        assert!(error_spectrum(&zero, &g, 8).unwrap().iter().all(|b| (b.ratio - 1.0).abs() < 1e-15));
        assert!(error_spectrum(&zero, &g, 3).is_err());
    }

    #[test]
    fn esp_isolates_a_zeroed_annulus() {
        let (n1, n2, bins) = (20, 24, 6);
        let g = rand_kspace(n1, n2, 1, 4);
        let r = radii(n1, n2);
        let r_max = r.iter().cloned().fold(0.0, f64::max);
        let width = r_max / bins as f64;
        let target = 4;
        let mut recon = g.clone();
        for (k, &rk) in r.iter().enumerate() {
            if ((rk / width) as usize).min(bins - 1) == target {
                recon.data_mut()[k] = Complex::new(0.0, 0.0);
            }
        }
        let esp = error_spectrum(&recon, &g, bins).unwrap();
        assert_eq!(esp.len(), bins);
        for (b, bin) in esp.iter().enumerate() {
            let want = if b == target { 1.0 } else { 0.0 };
            assert!((bin.ratio - want).abs() < 1e-15, "bin {b}: {}", bin.ratio);
            assert!((bin.center - (b as f64 + 0.5) * width).abs() < 1e-15);
        }
    }

    #[test]
    fn esp_bins_partition_the_radius_range() {
        let r = radii(9, 14);
        let r_max = r.iter().cloned().fold(0.0, f64::max);
        let bins = 5;
        let width = r_max / bins as f64;
        let mut counts = vec![0; bins];
        for &rk in &r {
            counts[((rk / width) as usize).min(bins - 1)] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 9 * 14);
        let esp = error_spectrum(&rand_kspace(9, 14, 1, 1), &rand_kspace(9, 14, 1, 2), bins).unwrap();
        assert!(esp.windows(2).all(|w| w[0].center < w[1].center));
    }

    #[test]
    fn report_of_perfect_reconstruction() {
        let g = rand_kspace(16, 16, 2, 7);
        let rep = evaluate("x", &g, &g, 0.5, String::new()).unwrap();
        assert_eq!(rep.nrmse, 0.0);
        assert_eq!(rep.ssim, 1.0);
        assert!(rep.esp.iter().all(|b| b.ratio == 0.0));
    }

    proptest! {
        #[test]
        fn ssim_of_nonnegative_images_is_bounded(seed in 0u64..1000) {
            let g = rand_image(14, 14, seed);
            let r = rand_image(14, 14, seed + 1);
            let s = ssim(&r, &g).unwrap();
            prop_assert!(s <= 1.0 + 1e-12);
            prop_assert!(s >= -1.0);
            prop_assert!(nrmse(&r, &g).unwrap() >= 0.0);
        }
    }
}

//! Linear shift-invariant k-space interpolation calibrated on ACS data.

use nalgebra::{Cholesky, DMatrix};
use num_complex::Complex;
use num_traits::Zero;

use crate::error::{Error, Result};
use crate::grid::KSpace;
use crate::sampling::{enumerate_local_configs, extract_acs, LocalConfigSet, SamplingMask};
use crate::scalar::Real;
use crate::support::{KernelSupport, Offset};

/// Relative Tikhonov weight applied to calibration normal equations.
pub const DEFAULT_REGULARIZATION: f64 = 1e-6;

/// Default kernel footprint `(A+1) x (A+1)`, rounded up to the next odd size
/// so the kernel stays centered.
pub fn default_kernel_shape(accel: usize) -> (usize, usize) {
    let r = accel + 1;
    let r = if r % 2 == 0 { r + 1 } else { r };
    (r, r)
}

/// One complex kernel per sampling configuration, covering all output
/// channels at once.
#[derive(Clone, Debug, PartialEq)]
pub struct GrappaKernelSet<T: Real> {
    kernel_shape: (usize, usize),
    channels: usize,
    configs: Vec<Vec<Offset>>,
    /// `weights[j][(m * L + c) * L + l]`: contribution of source channel `c`
    /// at offset `configs[j][m]` to output channel `l`.
    weights: Vec<Vec<Complex<T>>>,
}

impl<T: Real> GrappaKernelSet<T> {
    pub fn from_parts(
        kernel_shape: (usize, usize),
        channels: usize,
        configs: Vec<Vec<Offset>>,
        weights: Vec<Vec<Complex<T>>>,
    ) -> Result<Self> {
        if configs.len() != weights.len() {
            return Err(Error::Dimension("one weight block per configuration".into()));
        }
        let (a, b) = ((kernel_shape.0 / 2) as isize, (kernel_shape.1 / 2) as isize);
        for (lambda, w) in configs.iter().zip(&weights) {
            if w.len() != lambda.len() * channels * channels {
                return Err(Error::Dimension(format!(
                    "configuration with {} offsets needs {} weights, got {}",
                    lambda.len(),
                    lambda.len() * channels * channels,
                    w.len()
                )));
            }
            if lambda.iter().any(|&(p, q)| p.abs() > a || q.abs() > b) {
                return Err(Error::InvalidParameter(
                    "configuration offset outside the kernel footprint".into(),
                ));
            }
            if w.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return Err(Error::NonFinite("GRAPPA weights"));
            }
        }
        Ok(Self {
            kernel_shape,
            channels,
            configs,
            weights,
        })
    }

    pub fn kernel_shape(&self) -> (usize, usize) {
        self.kernel_shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn configs(&self) -> &[Vec<Offset>] {
        &self.configs
    }

    pub fn weights(&self, j: usize) -> &[Complex<T>] {
        &self.weights[j]
    }

    /// Weight of source `(offset index m, channel c)` for output channel `l`.
    pub fn weight(&self, j: usize, m: usize, c: usize, l: usize) -> Complex<T> {
        self.weights[j][(m * self.channels + c) * self.channels + l]
    }

    fn index_of(&self, lambda: &[Offset]) -> Option<usize> {
        self.configs.iter().position(|c| c.as_slice() == lambda)
    }

    /// Maps each configuration of `configs` to its kernel.
    fn lookup(&self, configs: &LocalConfigSet) -> Result<Vec<usize>> {
        configs
            .configs()
            .iter()
            .map(|lambda| {
                self.index_of(lambda)
                    .ok_or_else(|| Error::MissingConfig(format!("{lambda:?}")))
            })
            .collect()
    }
}

/// Calibrates one kernel per configuration of `configs` on the ACS block
/// with the default regularization.
pub fn train_grappa<T: Real>(
    acs: &KSpace<T>,
    configs: &LocalConfigSet,
    kernel_shape: (usize, usize),
) -> Result<GrappaKernelSet<T>> {
    train_grappa_regularized(acs, configs, kernel_shape, DEFAULT_REGULARIZATION)
}

/// Solves `min_w sum |d_l[k] - sum_{m,c} w d_c[k - m]|^2 + lambda ||w||^2`
/// with `lambda = reg * mean |acs|^2`, for every output channel at once.
pub fn train_grappa_regularized<T: Real>(
    acs: &KSpace<T>,
    configs: &LocalConfigSet,
    kernel_shape: (usize, usize),
    reg: f64,
) -> Result<GrappaKernelSet<T>> {
    acs.ensure_finite("ACS data")?;
    let (m1, m2, nc) = acs.dims();
    let lambda_reg = T::lit(reg) * acs.energy() / T::from_count(acs.data().len());
    let mut weights = Vec::with_capacity(configs.len());
    for (j, lambda) in configs.configs().iter().enumerate() {
        let (lo1, hi1, lo2, hi2) = lambda.iter().fold((0, 0, 0, 0), |(a, b, c, d), &(p, q)| {
            (a.min(p), b.max(p), c.min(q), d.max(q))
        });
        // targets k with every source k - m inside the block
        let rows1 = hi1..(m1 as isize + lo1);
        let rows2 = hi2..(m2 as isize + lo2);
        let rows = rows1.len() * rows2.len();
        let unknowns = lambda.len() * nc;
        if rows < unknowns {
            return Err(Error::Underdetermined {
                config: j,
                rows,
                required: unknowns,
            });
        }
        let mut x = DMatrix::<Complex<T>>::zeros(rows, unknowns);
        let mut y = DMatrix::<Complex<T>>::zeros(rows, nc);
        let mut r = 0;
        for k1 in rows1.clone() {
            for k2 in rows2.clone() {
                for (mi, &(p, q)) in lambda.iter().enumerate() {
                    let src = acs.pixel((k1 - p) as usize, (k2 - q) as usize);
                    for (c, &v) in src.iter().enumerate() {
                        x[(r, mi * nc + c)] = v;
                    }
                }
                for (l, &v) in acs.pixel(k1 as usize, k2 as usize).iter().enumerate() {
                    y[(r, l)] = v;
                }
                r += 1;
            }
        }
        let mut normal = x.ad_mul(&x);
        for i in 0..unknowns {
            normal[(i, i)] += Complex::new(lambda_reg, T::zero());
        }
        let rhs = x.ad_mul(&y);
        let solution = Cholesky::new(normal)
            .ok_or_else(|| Error::InvalidParameter(format!(
                "calibration normal equations of configuration {j} are not positive definite"
            )))?
            .solve(&rhs);
        let mut w = vec![Complex::zero(); unknowns * nc];
        for s in 0..unknowns {
            for l in 0..nc {
                w[s * nc + l] = solution[(s, l)];
            }
        }
        weights.push(w);
    }
    GrappaKernelSet::from_parts(kernel_shape, nc, configs.configs().to_vec(), weights)
}

fn check_grid<T: Real>(d_zp: &KSpace<T>, kernels: &GrappaKernelSet<T>, configs: &LocalConfigSet) -> Result<()> {
    if (d_zp.n1(), d_zp.n2()) != configs.dims() {
        return Err(Error::Dimension("data and configuration map sizes differ".into()));
    }
    if d_zp.channels() != kernels.channels {
        return Err(Error::Dimension(format!(
            "kernels trained for {} channels, data has {}",
            kernels.channels,
            d_zp.channels()
        )));
    }
    Ok(())
}

/// Fills every unsampled location with its configuration's interpolation
/// (one dot product per target); sampled entries are copied unchanged.
pub fn apply_grappa<T: Real>(
    d_zp: &KSpace<T>,
    kernels: &GrappaKernelSet<T>,
    configs: &LocalConfigSet,
) -> Result<KSpace<T>> {
    check_grid(d_zp, kernels, configs)?;
    let map = kernels.lookup(configs)?;
    let (n1, n2, nc) = d_zp.dims();
    let mut out = d_zp.clone();
    let mut acc = vec![Complex::<T>::zero(); nc];
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            let Some(j) = configs.label(k1, k2) else {
                continue;
            };
            let kj = map[j];
            let w = &kernels.weights[kj];
            acc.fill(Complex::zero());
            for (mi, &(p, q)) in kernels.configs[kj].iter().enumerate() {
                let src = d_zp.pixel((k1 as isize - p) as usize, (k2 as isize - q) as usize);
                for (c, &v) in src.iter().enumerate() {
                    let row = &w[(mi * nc + c) * nc..(mi * nc + c + 1) * nc];
                    for (a, &wv) in acc.iter_mut().zip(row) {
                        *a += wv * v;
                    }
                }
            }
            out.pixel_mut(k1, k2).copy_from_slice(&acc);
        }
    }
    Ok(out)
}

/// Same result as [`apply_grappa`], computed as `d_zp + sum_j g_j * (w_j conv d_zp)`
/// with full-grid zero-padded convolutions.
pub fn apply_grappa_convolution<T: Real>(
    d_zp: &KSpace<T>,
    kernels: &GrappaKernelSet<T>,
    configs: &LocalConfigSet,
) -> Result<KSpace<T>> {
    check_grid(d_zp, kernels, configs)?;
    let map = kernels.lookup(configs)?;
    let (n1, n2, nc) = d_zp.dims();
    let mut out = d_zp.clone();
    for (j, &kj) in map.iter().enumerate() {
        let g = configs.g_mask(j);
        for l in 0..nc {
            let mut conv = vec![Complex::<T>::zero(); n1 * n2];
            for (mi, &(p, q)) in kernels.configs[kj].iter().enumerate() {
                for c in 0..nc {
                    let w = kernels.weight(kj, mi, c, l);
                    for k1 in 0..n1 {
                        let s1 = k1 as isize - p;
                        if s1 < 0 || s1 >= n1 as isize {
                            continue;
                        }
                        for k2 in 0..n2 {
                            let s2 = k2 as isize - q;
                            if s2 < 0 || s2 >= n2 as isize {
                                continue;
                            }
                            conv[k1 * n2 + k2] += w * d_zp.get(s1 as usize, s2 as usize, c);
                        }
                    }
                }
            }
            for (i, (&gi, v)) in g.iter().zip(conv).enumerate() {
                if gi {
                    let idx = i * nc + l;
                    out.data_mut()[idx] += v;
                }
            }
        }
    }
    Ok(out)
}

/// Calibrates on the mask's ACS block and interpolates every reachable
/// unsampled location.
pub fn grappa_reconstruct<T: Real>(
    d_zp: &KSpace<T>,
    mask: &SamplingMask,
    kernel_shape: (usize, usize),
) -> Result<KSpace<T>> {
    let support = KernelSupport::rectangular(kernel_shape.0, kernel_shape.1)?;
    let configs = enumerate_local_configs(mask, &support);
    let acs = extract_acs(d_zp, mask)?;
    let kernels = train_grappa(&acs, &configs, kernel_shape)?;
    apply_grappa(d_zp, &kernels, &configs)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::sampling::{apply_mask, uniform_mask};

    fn rand_c(rng: &mut ChaCha8Rng) -> Complex<f64> {
        Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    }

    /// Multichannel data obeying one exact autoregressive relation along k2:
    /// `d[k1][k2] = B d[k1][k2 - 1]` with a unitary-ish mixing `B`; every
    /// sample is then a fixed linear function of any other on the same row.
    fn planted(n1: usize, n2: usize, nc: usize, seed: u64) -> KSpace<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<Complex<f64>> = (0..nc)
            .map(|_| Complex::from_polar(1.0, rng.gen_range(-3.0..3.0)))
            .collect();
        let mix: Vec<Complex<f64>> = (0..nc * nc).map(|_| rand_c(&mut rng)).collect();
        let starts: Vec<Complex<f64>> = (0..n1 * nc).map(|_| rand_c(&mut rng)).collect();
        // diagonal recursion in a mixed basis: z_c[k2] = phase_c^k2 z_c[0], d = mix z
        KSpace::from_fn(n1, n2, nc, |k1, k2, l| {
            (0..nc)
                .map(|c| mix[l * nc + c] * phases[c].powu(k2 as u32) * starts[k1 * nc + c])
                .sum()
        })
    }

    #[test]
    fn default_shape_is_odd() {
        assert_eq!(default_kernel_shape(4), (5, 5));
        assert_eq!(default_kernel_shape(3), (5, 5));
        assert_eq!(default_kernel_shape(2), (3, 3));
    }

    #[test]
    fn identity_interpolation_on_constant_data() {
        let acs = KSpace::<f64>::from_fn(8, 8, 1, |_, _, _| Complex::new(2.0, -1.0));
        // a 1x3 footprint around (3,3) with (3,4) also missing leaves only (3,2)
        let mut sampled = vec![true; 64];
        sampled[3 * 8 + 3] = false;
        sampled[3 * 8 + 4] = false;
        let mask2 = SamplingMask::new(8, 8, sampled, None).unwrap();
        let support = KernelSupport::rectangular(1, 3).unwrap();
        let set = enumerate_local_configs(&mask2, &support);
        let single = set.configs().iter().position(|c| c.len() == 1).unwrap();
        let k = train_grappa(&acs, &set, (1, 3)).unwrap();
        let w = k.weight(single, 0, 0, 0);
        assert!((w - Complex::new(1.0, 0.0)).norm() < 1e-6, "{w}");
    }

    #[test]
    fn planted_kernel_predictions_are_exact() {
        let full = planted(24, 40, 3, 1);
        let mask = uniform_mask(24, 40, 2, 16).unwrap();
        let support = KernelSupport::rectangular(3, 3).unwrap();
        let configs = enumerate_local_configs(&mask, &support);
        let acs = extract_acs(&full, &mask).unwrap();
        let kernels = train_grappa(&acs, &configs, (3, 3)).unwrap();
        let d_zp = apply_mask(&full, &mask).unwrap();
        let rec = apply_grappa(&d_zp, &kernels, &configs).unwrap();
        let err = rec.relative_error(&full);
        assert!(err < 1e-6, "relative error {err}");
        // per-location predictions
        for k1 in 0..24 {
            for k2 in 0..40 {
                for l in 0..3 {
                    let e = (rec.get(k1, k2, l) - full.get(k1, k2, l)).norm();
                    assert!(e < 1e-6, "({k1},{k2},{l}) {e}");
                }
            }
        }
    }

    #[test]
    fn too_little_acs_names_row_count() {
        let full = planted(8, 40, 4, 2);
        let mask = uniform_mask(8, 40, 4, 4).unwrap();
        let support = KernelSupport::rectangular(5, 5).unwrap();
        let configs = enumerate_local_configs(&mask, &support);
        let acs = extract_acs(&full, &mask).unwrap();
        match train_grappa(&acs, &configs, (5, 5)) {
            Err(Error::Underdetermined { rows, required, .. }) => assert!(rows < required),
            other => panic!("expected underdetermined error, got {other:?}"),
        }
    }

    fn trained_random(seed: u64) -> (KSpace<f64>, GrappaKernelSet<f64>, LocalConfigSet, SamplingMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = KSpace::from_fn(20, 36, 2, |_, _, _| rand_c(&mut rng));
        let mask = uniform_mask(20, 36, 3, 14).unwrap();
        let support = KernelSupport::rectangular(5, 5).unwrap();
        let configs = enumerate_local_configs(&mask, &support);
        let kernels = train_grappa(&extract_acs(&full, &mask).unwrap(), &configs, (5, 5)).unwrap();
        (apply_mask(&full, &mask).unwrap(), kernels, configs, mask)
    }

    #[test]
    fn sampled_entries_unchanged_and_full_input_identity() {
        let (d_zp, kernels, configs, mask) = trained_random(3);
        let rec = apply_grappa(&d_zp, &kernels, &configs).unwrap();
        for k1 in 0..20 {
            for k2 in 0..36 {
                if mask.is_sampled(k1, k2) {
                    assert_eq!(rec.pixel(k1, k2), d_zp.pixel(k1, k2));
                }
            }
        }
        let full_mask = SamplingMask::full(20, 36);
        let none = enumerate_local_configs(&full_mask, &KernelSupport::rectangular(5, 5).unwrap());
        assert!(none.is_empty());
        assert_eq!(apply_grappa(&d_zp, &kernels, &none).unwrap(), d_zp);
    }

    #[test]
    fn convolution_form_matches_dot_products() {
        let (d_zp, kernels, configs, _) = trained_random(4);
        let a = apply_grappa(&d_zp, &kernels, &configs).unwrap();
        let b = apply_grappa_convolution(&d_zp, &kernels, &configs).unwrap();
        assert!(b.relative_error(&a) < 1e-10);
    }

    #[test]
    fn application_is_linear() {
        let (x, kernels, configs, mask) = trained_random(5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = apply_mask(&KSpace::from_fn(20, 36, 2, |_, _, _| rand_c(&mut rng)), &mask).unwrap();
        let (alpha, beta) = (Complex::new(0.7, -1.3), Complex::new(-2.0, 0.4));
        let combo = KSpace::from_fn(20, 36, 2, |a, b, c| alpha * x.get(a, b, c) + beta * y.get(a, b, c));
        let lhs = apply_grappa(&combo, &kernels, &configs).unwrap();
        let ax = apply_grappa(&x, &kernels, &configs).unwrap();
        let ay = apply_grappa(&y, &kernels, &configs).unwrap();
        let rhs = KSpace::from_fn(20, 36, 2, |a, b, c| alpha * ax.get(a, b, c) + beta * ay.get(a, b, c));
        assert!(lhs.relative_error(&rhs) < 1e-10);
    }

    #[test]
    fn unseen_configuration_is_reported() {
        let (d_zp, kernels, _, _) = trained_random(6);
        let other = uniform_mask(20, 36, 2, 14).unwrap();
        let configs = enumerate_local_configs(&other, &KernelSupport::rectangular(5, 5).unwrap());
        assert!(matches!(
            apply_grappa(&d_zp, &kernels, &configs),
            Err(Error::MissingConfig(_))
        ));
    }
}

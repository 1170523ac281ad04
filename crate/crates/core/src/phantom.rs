//! Synthetic multi-coil k-space: an ellipse-composite object with limited
//! support, smooth polynomial phase and smooth Gaussian coil sensitivities.

use std::f64::consts::PI;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{KSpace, MagnitudeImage};
use crate::kspace::{fft2_centered, rss_image};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub n1: usize,
    pub n2: usize,
    pub coils: usize,
    /// Highest total degree of the phase polynomial (0 gives a real image).
    pub phase_order: usize,
    /// Standard deviation of complex white noise added in k-space.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n1: 64,
            n2: 187,
            coils: 4,
            phase_order: 2,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n1 < 8 || self.n2 < 8 {
            return Err(Error::InvalidParameter(format!("phantom grid {}x{} is below 8x8", self.n1, self.n2)));
        }
        if self.coils == 0 {
            return Err(Error::InvalidParameter("at least one coil required".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidParameter("noise level must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Fully sampled phantom data.
#[derive(Clone, Debug)]
pub struct Phantom<T> {
    pub kspace: KSpace<T>,
    pub image: MagnitudeImage<T>,
    /// Image-domain support of the object (row-major).
    pub support: Vec<bool>,
}

/// Ellipse `(centre_u, centre_v, semi_u, semi_v, angle, intensity)` in
/// field-of-view units, coordinates in `[-0.5, 0.5)`.
type Ellipse = (f64, f64, f64, f64, f64, f64);

/// Outer boundary; everything else lies inside it. Semi-axes of 0.4 leave
/// a 10% margin to every edge of the field of view.
const OUTLINE: Ellipse = (0.0, 0.0, 0.40, 0.36, 0.0, 1.0);

const INTERIOR: [Ellipse; 8] = [
    (0.0, 0.0, 0.37, 0.33, 0.0, -0.35),
    (0.04, 0.11, 0.13, 0.06, 0.35, -0.2),
    (0.04, -0.11, 0.15, 0.07, -0.35, -0.2),
    (-0.16, 0.0, 0.07, 0.09, 0.0, 0.25),
    (0.2, 0.02, 0.035, 0.03, 0.0, 0.2),
    (-0.26, -0.06, 0.02, 0.035, 0.0, 0.15),
    (-0.26, 0.07, 0.025, 0.02, 0.0, 0.15),
    (0.1, 0.0, 0.05, 0.02, 0.5, 0.1),
];

fn inside(e: &Ellipse, u: f64, v: f64) -> bool {
    let (cu, cv, a, b, t, _) = *e;
    let (du, dv) = (u - cu, v - cv);
    let (c, s) = (t.cos(), t.sin());
    let (x, y) = (c * du + s * dv, -s * du + c * dv);
    (x / a).powi(2) + (y / b).powi(2) <= 1.0
}

fn coords(n1: usize, n2: usize, i: usize, j: usize) -> (f64, f64) {
    ((i as f64 - (n1 / 2) as f64) / n1 as f64, (j as f64 - (n2 / 2) as f64) / n2 as f64)
}

/// Object magnitude: piecewise constant ellipses with a gentle linear
/// shading, zero outside the outline.
fn magnitude(u: f64, v: f64) -> f64 {
    if !inside(&OUTLINE, u, v) {
        return 0.0;
    }
    let mut m = OUTLINE.5;
    for e in &INTERIOR {
        if inside(e, u, v) {
            m += e.5;
        }
    }
    m * (1.0 + 0.15 * u - 0.1 * v)
}

/// Monomials `u^i v^j` with `1 <= i + j <= order`, seeded coefficients.
fn phase_terms(order: usize, rng: &mut ChaCha8Rng) -> Vec<(i32, i32, f64)> {
    let mut terms = Vec::new();
    for d in 1..=order {
        for i in 0..=d {
            let c = rng.gen_range(-1.0..1.0) * PI / (2.0 * d as f64);
            terms.push((i as i32, (d - i) as i32, c));
        }
    }
    terms
}

struct Coil {
    centre: (f64, f64),
    width: f64,
    ramp: (f64, f64),
}

fn coils(count: usize, rng: &mut ChaCha8Rng) -> Vec<Coil> {
    if count == 1 {
        return Vec::new();
    }
    let jitter = rng.gen_range(0.0..2.0 * PI);
    (0..count)
        .map(|l| {
            let theta = jitter + 2.0 * PI * l as f64 / count as f64;
            Coil {
                centre: (0.5 * theta.cos(), 0.5 * theta.sin()),
                width: 0.35,
                ramp: (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
            }
        })
        .collect()
}

/// Builds the phantom. A single coil has uniform sensitivity, so with
/// `phase_order = 0` the image is real and its k-space Hermitian.
pub fn make_phantom<T: Real>(spec: &PhantomSpec) -> Result<Phantom<T>> {
    spec.validate()?;
    let (n1, n2, nc) = (spec.n1, spec.n2, spec.coils);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let terms = phase_terms(spec.phase_order, &mut rng);
    let maps = coils(nc, &mut rng);
    let mut support = vec![false; n1 * n2];
    let mut img = KSpace::<T>::zeros(n1, n2, nc);
    for i in 0..n1 {
        for j in 0..n2 {
            let (u, v) = coords(n1, n2, i, j);
            support[i * n2 + j] = inside(&OUTLINE, u, v);
            let m = magnitude(u, v);
            if m == 0.0 {
                continue;
            }
            let phi: f64 = terms.iter().map(|&(a, b, c)| c * (2.0 * u).powi(a) * (2.0 * v).powi(b)).sum();
            let rho = Complex::from_polar(m, phi);
            for c in 0..nc {
                let s = match maps.get(c) {
                    None => Complex::new(1.0, 0.0),
                    Some(coil) => {
                        let d2 = (u - coil.centre.0).powi(2) + (v - coil.centre.1).powi(2);
                        let amp = (-d2 / (2.0 * coil.width * coil.width)).exp();
                        Complex::from_polar(amp, 2.0 * PI * (coil.ramp.0 * u + coil.ramp.1 * v))
                    }
                };
                let x = rho * s;
                img.set(i, j, c, Complex::new(T::lit(x.re), T::lit(x.im)));
            }
        }
    }
    let mut kspace = fft2_centered(&img)?;
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma / 2f64.sqrt())
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for v in kspace.data_mut() {
            *v += Complex::new(T::lit(normal.sample(&mut rng)), T::lit(normal.sample(&mut rng)));
        }
    }
    let image = rss_image(&kspace)?;
    Ok(Phantom { kspace, image, support })
}

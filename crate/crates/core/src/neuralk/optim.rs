//! Adaptive-moment optimizer and the central-difference gradient oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::graph::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators over the flattened parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<T>,
    second: Vec<T>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            first: vec![T::zero(); num_params],
            second: vec![T::zero(); num_params],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Learning rate at `step` of `steps` under geometric decay from the
/// configured rate to `final_fraction` of it.
pub fn decayed_rate(config: &AdamConfig, final_fraction: f64, step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return config.learning_rate;
    }
    config.learning_rate * final_fraction.powf(step as f64 / (steps - 1) as f64)
}

/// One bias-corrected adaptive-moment update.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, grads: &ParamSet<T>, state: &mut AdamState<T>) -> Result<()> {
    if !params.same_layout(grads) || state.first.len() != params.len() {
        return Err(Error::Dimension("parameters, gradients and optimizer state differ in shape".into()));
    }
    let cfg = state.config;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t));
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.epsilon);
    let mut flat = params.flatten();
    let g = grads.flatten();
    for i in 0..flat.len() {
        let m = b1 * state.first[i] + (T::one() - b1) * g[i];
        let v = b2 * state.second[i] + (T::one() - b2) * g[i] * g[i];
        state.first[i] = m;
        state.second[i] = v;
        let mhat = m / c1;
        let vhat = v / c2;
        flat[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    params.assign(&flat)
}

/// Central differences `(f(w + h e_i) - f(w - h e_i)) / 2h` for every
/// coordinate of a flat parameter vector.
pub fn finite_diff<T: Real>(mut f: impl FnMut(&[T]) -> T, x: &[T], h: T) -> Vec<T> {
    let mut probe = x.to_vec();
    let two_h = h + h;
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / two_h
        })
        .collect()
}

/// [`finite_diff`] over every parameter of a [`ParamSet`].
pub fn finite_diff_grad<T: Real>(mut loss: impl FnMut(&ParamSet<T>) -> T, params: &ParamSet<T>, h: T) -> ParamSet<T> {
    let mut scratch = params.clone();
    let flat = finite_diff(
        |w| {
            scratch.assign(w).expect("same layout");
            loss(&scratch)
        },
        &params.flatten(),
        h,
    );
    let mut out = params.zeros_like();
    out.assign(&flat).expect("same layout");
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::neuralk::layer::ConvLayer;
    use crate::support::KernelSupport;

    fn scalar_params(v: f64) -> ParamSet<f64> {
        ParamSet {
            layers: vec![],
            scalars: vec![v],
        }
    }

    #[test]
    fn quadratic_derivative() {
        let g = finite_diff(|w: &[f64]| w[0] * w[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let z = finite_diff(|_: &[f64]| 4.0, &[1.0, 2.0], 1e-5);
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet {
            layers: vec![ConvLayer::kaiming(2, 2, KernelSupport::ellipsoidal(3, 3).unwrap(), 1.0, &mut rng)],
            scalars: vec![1.0],
        };
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), p.len());
        for _ in 0..5 {
            adam_step(&mut p, &before.zeros_like(), &mut st).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        // bias correction makes every step exactly lr * g / (|g| + eps)
        let cfg = AdamConfig::default();
        let mut p = scalar_params(0.0);
        let g = scalar_params(0.25);
        let mut st = AdamState::new(cfg, 1);
        let mut prev = 0.0;
        for k in 1..=200 {
            adam_step(&mut p, &g, &mut st).unwrap();
            let step = p.scalars[0] - prev;
            prev = p.scalars[0];
            assert!(step < 0.0);
            if k > 10 {
                assert!((step.abs() - cfg.learning_rate).abs() < 1e-6 * cfg.learning_rate + 1e-9);
            }
        }
        assert_eq!(st.step(), 200);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = scalar_params(1.0);
            let mut st = AdamState::new(AdamConfig::default(), 1);
            for k in 0..50 {
                let g = scalar_params((k as f64 * 0.37).sin() + p.scalars[0]);
                adam_step(&mut p, &g, &mut st).unwrap();
            }
            p.scalars[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}

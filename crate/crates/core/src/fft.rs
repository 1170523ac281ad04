//! 2D FFT plans and the DC-centered unitary transform used throughout.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Real;

/// Cached row/column plans for an `n1 x n2` row-major complex plane.
///
/// `forward`/`inverse` are the raw (unnormalized, non-centered) DFTs.
pub struct Fft2<T: Real> {
    n1: usize,
    n2: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    scratch: Vec<Complex<T>>,
    transposed: Vec<Complex<T>>,
}

impl<T: Real> Fft2<T> {
    pub fn new(n1: usize, n2: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(n2);
        let row_inv = planner.plan_fft_inverse(n2);
        let col_fwd = planner.plan_fft_forward(n1);
        let col_inv = planner.plan_fft_inverse(n1);
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            n1,
            n2,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            scratch: vec![Complex::default(); scratch_len],
            transposed: vec![Complex::default(); n1 * n2],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }

    pub fn forward(&mut self, plane: &mut [Complex<T>]) {
        self.run(plane, true);
    }

    pub fn inverse(&mut self, plane: &mut [Complex<T>]) {
        self.run(plane, false);
    }

    fn run(&mut self, plane: &mut [Complex<T>], forward: bool) {
        let (n1, n2) = (self.n1, self.n2);
        assert_eq!(plane.len(), n1 * n2, "plane size");
        let (rows, cols) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        rows.process_with_scratch(plane, &mut self.scratch);
        for k1 in 0..n1 {
            for k2 in 0..n2 {
                self.transposed[k2 * n1 + k1] = plane[k1 * n2 + k2];
            }
        }
        cols.process_with_scratch(&mut self.transposed, &mut self.scratch);
        for k2 in 0..n2 {
            for k1 in 0..n1 {
                plane[k1 * n2 + k2] = self.transposed[k2 * n1 + k1];
            }
        }
    }

    /// Unitary transform with the zero frequency at index `(n1/2, n2/2)`.
    pub fn forward_centered(&mut self, plane: &mut [Complex<T>]) {
        ifftshift(plane, self.n1, self.n2);
        self.forward(plane);
        fftshift(plane, self.n1, self.n2);
        self.normalize(plane);
    }

    /// Inverse of [`forward_centered`](Self::forward_centered).
    pub fn inverse_centered(&mut self, plane: &mut [Complex<T>]) {
        ifftshift(plane, self.n1, self.n2);
        self.inverse(plane);
        fftshift(plane, self.n1, self.n2);
        self.normalize(plane);
    }

    fn normalize(&self, plane: &mut [Complex<T>]) {
        let s = T::one() / T::from_count(self.n1 * self.n2).sqrt();
        for v in plane.iter_mut() {
            *v = v.scale(s);
        }
    }
}

/// Moves index 0 to `n/2` along both axes.
pub fn fftshift<E: Copy>(plane: &mut [E], n1: usize, n2: usize) {
    roll(plane, n1, n2, n1 / 2, n2 / 2);
}

/// Moves index `n/2` to 0 along both axes.
pub fn ifftshift<E: Copy>(plane: &mut [E], n1: usize, n2: usize) {
    roll(plane, n1, n2, n1 - n1 / 2, n2 - n2 / 2);
}

fn roll<E: Copy>(plane: &mut [E], n1: usize, n2: usize, s1: usize, s2: usize) {
    let src = plane.to_vec();
    for k1 in 0..n1 {
        let d1 = (k1 + s1) % n1;
        for k2 in 0..n2 {
            plane[d1 * n2 + (k2 + s2) % n2] = src[k1 * n2 + k2];
        }
    }
}

/// Smallest size `>= n` whose prime factors are all in {2, 3, 5, 7}.
pub fn smooth_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5, 7] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

//! Bias-free 2D convolution over a kernel support, ReLU and initialization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::RealChannelStack;
use crate::scalar::Real;
use crate::support::KernelSupport;

/// Convolution weights restricted to the offsets of a [`KernelSupport`].
///
/// Stored as `[offset][in][out]` so that the inner loops of the forward and
/// backward passes run over contiguous output channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    in_channels: usize,
    out_channels: usize,
    support: KernelSupport,
    weights: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, support: KernelSupport) -> Self {
        let len = support.len() * in_channels * out_channels;
        Self {
            in_channels,
            out_channels,
            support,
            weights: vec![T::zero(); len],
        }
    }

    /// Uniform initialization in `+-gain * sqrt(6 / fan_in)` with
    /// `fan_in = in_channels * |support|`.
    pub fn kaiming<R: Rng>(in_channels: usize, out_channels: usize, support: KernelSupport, gain: f64, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_channels, out_channels, support);
        let fan_in = (in_channels * layer.support.len()) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        for w in &mut layer.weights {
            *w = T::lit(rng.gen_range(-bound..=bound));
        }
        layer
    }

    /// Builds a layer from weights laid out `[out][in][offset]`.
    pub fn from_weights(in_channels: usize, out_channels: usize, support: KernelSupport, weights: &[T]) -> Result<Self> {
        let n = support.len();
        if weights.len() != n * in_channels * out_channels {
            return Err(Error::Dimension(format!(
                "{out_channels}x{in_channels}x{n} layer needs {} weights, got {}",
                n * in_channels * out_channels,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("layer weights"));
        }
        let mut layer = Self::zeros(in_channels, out_channels, support);
        for o in 0..out_channels {
            for i in 0..in_channels {
                for m in 0..n {
                    layer.set(o, i, m, weights[(o * in_channels + i) * n + m]);
                }
            }
        }
        Ok(layer)
    }

    /// Weights laid out `[out][in][offset]`.
    pub fn to_weights(&self) -> Vec<T> {
        let n = self.support.len();
        let mut out = Vec::with_capacity(self.weights.len());
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for m in 0..n {
                    out.push(self.get(o, i, m));
                }
            }
        }
        out
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn support(&self) -> &KernelSupport {
        &self.support
    }

    #[inline]
    fn slot(&self, o: usize, i: usize, m: usize) -> usize {
        (m * self.in_channels + i) * self.out_channels + o
    }

    /// Weight from input channel `i` at offset index `m` to output `o`.
    #[inline]
    pub fn get(&self, o: usize, i: usize, m: usize) -> T {
        self.weights[self.slot(o, i, m)]
    }

    #[inline]
    pub fn set(&mut self, o: usize, i: usize, m: usize, value: T) {
        let s = self.slot(o, i, m);
        self.weights[s] = value;
    }

    /// Packed storage (`[offset][in][out]`).
    pub fn raw(&self) -> &[T] {
        &self.weights
    }

    pub fn raw_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn num_weights(&self) -> usize {
        self.weights.len()
    }

    pub(crate) fn same_layout(&self, other: &Self) -> bool {
        self.in_channels == other.in_channels
            && self.out_channels == other.out_channels
            && self.support == other.support
    }
}

fn check_input<T: Real>(x: &RealChannelStack<T>, layer: &ConvLayer<T>) -> Result<()> {
    if x.channels() != layer.in_channels {
        return Err(Error::Dimension(format!(
            "layer expects {} input channels, got {}",
            layer.in_channels,
            x.channels()
        )));
    }
    Ok(())
}

/// Visits every `(target, source, offset index)` triple with both pixels
/// inside the grid; `source = target - offset`.
#[inline]
fn for_each_tap(n1: usize, n2: usize, support: &KernelSupport, mut f: impl FnMut(usize, usize, usize)) {
    let (n1i, n2i) = (n1 as isize, n2 as isize);
    for (m, &(p, q)) in support.offsets().iter().enumerate() {
        let k1_lo = p.max(0);
        let k1_hi = (n1i + p).min(n1i);
        let k2_lo = q.max(0);
        let k2_hi = (n2i + q).min(n2i);
        for k1 in k1_lo..k1_hi {
            let s1 = k1 - p;
            for k2 in k2_lo..k2_hi {
                let s2 = k2 - q;
                f((k1 * n2i + k2) as usize, (s1 * n2i + s2) as usize, m);
            }
        }
    }
}

/// Same-size convolution with zero padding:
/// `out[k][o] = sum_i sum_m w[o][i][m] x[k - m][i]`.
pub fn conv2d_same<T: Real>(x: &RealChannelStack<T>, layer: &ConvLayer<T>) -> Result<RealChannelStack<T>> {
    check_input(x, layer)?;
    let (n1, n2, ci) = x.dims();
    let co = layer.out_channels;
    let mut out = RealChannelStack::zeros(n1, n2, co);
    let xd = x.data();
    let w = &layer.weights;
    let od = out.data_mut();
    for_each_tap(n1, n2, &layer.support, |t, s, m| {
        let src = &xd[s * ci..(s + 1) * ci];
        let dst = &mut od[t * co..(t + 1) * co];
        let wm = &w[m * ci * co..(m + 1) * ci * co];
        for (i, &v) in src.iter().enumerate() {
            if v == T::zero() {
                continue;
            }
            let row = &wm[i * co..(i + 1) * co];
            for (d, &wv) in dst.iter_mut().zip(row) {
                *d += v * wv;
            }
        }
    });
    Ok(out)
}

/// Gradient of `sum(upstream * conv2d_same(x, layer))` with respect to the
/// input.
pub fn conv2d_same_input_grad<T: Real>(upstream: &RealChannelStack<T>, layer: &ConvLayer<T>) -> RealChannelStack<T> {
    let (n1, n2, co) = upstream.dims();
    let ci = layer.in_channels;
    let mut gx = RealChannelStack::zeros(n1, n2, ci);
    let gd = upstream.data();
    // transposed to [offset][out][in] so the inner loop is an axpy over
    // input channels (float reductions do not vectorize)
    let mut wt = vec![T::zero(); layer.weights.len()];
    for m in 0..layer.support.len() {
        for i in 0..ci {
            for o in 0..co {
                wt[(m * co + o) * ci + i] = layer.weights[(m * ci + i) * co + o];
            }
        }
    }
    let xd = gx.data_mut();
    for_each_tap(n1, n2, &layer.support, |t, s, m| {
        let g = &gd[t * co..(t + 1) * co];
        let dst = &mut xd[s * ci..(s + 1) * ci];
        let wm = &wt[m * ci * co..(m + 1) * ci * co];
        for (o, &gv) in g.iter().enumerate() {
            if gv == T::zero() {
                continue;
            }
            let row = &wm[o * ci..(o + 1) * ci];
            for (d, &wv) in dst.iter_mut().zip(row) {
                *d += gv * wv;
            }
        }
    });
    gx
}

/// Accumulates the weight gradient of `sum(upstream * conv2d_same(x, .))`
/// into `grad` (packed layout).
pub fn conv2d_same_weight_grad<T: Real>(x: &RealChannelStack<T>, upstream: &RealChannelStack<T>, layer: &ConvLayer<T>, grad: &mut [T]) {
    let (n1, n2, ci) = x.dims();
    let co = layer.out_channels;
    let xd = x.data();
    let gd = upstream.data();
    for_each_tap(n1, n2, &layer.support, |t, s, m| {
        let g = &gd[t * co..(t + 1) * co];
        let src = &xd[s * ci..(s + 1) * ci];
        let gm = &mut grad[m * ci * co..(m + 1) * ci * co];
        for (i, &v) in src.iter().enumerate() {
            if v == T::zero() {
                continue;
            }
            let row = &mut gm[i * co..(i + 1) * co];
            for (r, &gv) in row.iter_mut().zip(g) {
                *r += v * gv;
            }
        }
    });
}

/// Elementwise `max(x, 0)`.
pub fn relu<T: Real>(x: &RealChannelStack<T>) -> RealChannelStack<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_stack(n1: usize, n2: usize, c: usize, seed: u64) -> RealChannelStack<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealChannelStack::from_fn(n1, n2, c, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn rect(r: usize) -> KernelSupport {
        KernelSupport::rectangular(r, r).unwrap()
    }

    /// Straightforward zero-padded convolution by direct indexing.
    fn conv_oracle(x: &RealChannelStack<f64>, layer: &ConvLayer<f64>) -> RealChannelStack<f64> {
        let (n1, n2, ci) = x.dims();
        RealChannelStack::from_fn(n1, n2, layer.out_channels(), |k1, k2, o| {
            let mut acc = 0.0;
            for (m, &(p, q)) in layer.support().offsets().iter().enumerate() {
                let (s1, s2) = (k1 as isize - p, k2 as isize - q);
                if s1 < 0 || s2 < 0 || s1 >= n1 as isize || s2 >= n2 as isize {
                    continue;
                }
                for i in 0..ci {
                    acc += layer.get(o, i, m) * x.get(s1 as usize, s2 as usize, i);
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel() {
        let x = rand_stack(6, 7, 1, 1);
        let layer = ConvLayer::from_weights(1, 1, rect(1), &[1.0]).unwrap();
        assert_eq!(conv2d_same(&x, &layer).unwrap(), x);
    }

    #[test]
    fn impulse_response_is_kernel_stamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = KernelSupport::ellipsoidal(5, 5).unwrap();
        let layer = ConvLayer::<f64>::kaiming(1, 2, s.clone(), 1.0, &mut rng);
        let mut x = RealChannelStack::zeros(9, 9, 1);
        x.set(4, 4, 0, 1.0);
        let y = conv2d_same(&x, &layer).unwrap();
        for k1 in 0..9isize {
            for k2 in 0..9isize {
                for o in 0..2 {
                    let off = (k1 - 4, k2 - 4);
                    let want = s
                        .offsets()
                        .iter()
                        .position(|&m| m == off)
                        .map_or(0.0, |m| layer.get(o, 0, m));
                    assert_eq!(y.get(k1 as usize, k2 as usize, o), want);
                }
            }
        }
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = ConvLayer::<f64>::kaiming(3, 4, KernelSupport::ellipsoidal(3, 5).unwrap(), 1.0, &mut rng);
        let x = rand_stack(7, 9, 3, 4);
        let a = conv2d_same(&x, &layer).unwrap();
        let b = conv_oracle(&x, &layer);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!(conv2d_same(&rand_stack(7, 9, 2, 0), &layer).is_err());
    }

    #[test]
    fn box_filter() {
        let layer = ConvLayer::from_weights(1, 1, rect(3), &[1.0; 9]).unwrap();
        let x = rand_stack(6, 6, 1, 5);
        let y = conv2d_same(&x, &layer).unwrap();
        for k1 in 0..6usize {
            for k2 in 0..6usize {
                let mut s = 0.0;
                for a in k1.saturating_sub(1)..(k1 + 2).min(6) {
                    for b in k2.saturating_sub(1)..(k2 + 2).min(6) {
                        s += x.get(a, b, 0);
                    }
                }
                assert!((y.get(k1, k2, 0) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_in_weights_and_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = KernelSupport::ellipsoidal(3, 3).unwrap();
        let l1 = ConvLayer::<f64>::kaiming(2, 3, s.clone(), 1.0, &mut rng);
        let l2 = ConvLayer::<f64>::kaiming(2, 3, s.clone(), 1.0, &mut rng);
        let (x, y) = (rand_stack(5, 6, 2, 7), rand_stack(5, 6, 2, 8));
        let (a, b) = (0.3, -1.7);
        let xy = RealChannelStack::from_fn(5, 6, 2, |i, j, c| a * x.get(i, j, c) + b * y.get(i, j, c));
        let lhs = conv2d_same(&xy, &l1).unwrap();
        let (cx, cy) = (conv2d_same(&x, &l1).unwrap(), conv2d_same(&y, &l1).unwrap());
        for ((l, u), v) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            assert!((l - (a * u + b * v)).abs() < 1e-12);
        }
        let wsum: Vec<f64> = l1.to_weights().iter().zip(l2.to_weights()).map(|(u, v)| a * u + b * v).collect();
        let l12 = ConvLayer::from_weights(2, 3, s, &wsum).unwrap();
        let lhs = conv2d_same(&x, &l12).unwrap();
        let (c1, c2) = (conv2d_same(&x, &l1).unwrap(), conv2d_same(&x, &l2).unwrap());
        for ((l, u), v) in lhs.data().iter().zip(c1.data()).zip(c2.data()) {
            assert!((l - (a * u + b * v)).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_round_trip_through_public_layout() {
        let w: Vec<f64> = (0..2 * 3 * 5).map(|v| v as f64).collect();
        let layer = ConvLayer::from_weights(3, 2, KernelSupport::ellipsoidal(3, 3).unwrap(), &w).unwrap();
        assert_eq!(layer.to_weights(), w);
        assert_eq!(layer.get(1, 2, 4), w[(3 + 2) * 5 + 4]);
    }

    #[test]
    fn relu_examples() {
        let x = RealChannelStack::from_vec(1, 2, 1, vec![-1.0, 2.5]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.5]);
        let r = rand_stack(5, 5, 3, 9);
        assert_eq!(relu(&relu(&r)), relu(&r));
    }

    #[test]
    fn two_linear_layers_collapse_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let l1 = ConvLayer::<f64>::kaiming(2, 4, rect(3), 1.0, &mut rng);
        let l2 = ConvLayer::<f64>::kaiming(4, 3, rect(3), 1.0, &mut rng);
        let s5 = rect(5);
        let mut composed = ConvLayer::zeros(2, 3, s5.clone());
        for (m1, &(p1, q1)) in l1.support().offsets().iter().enumerate() {
            for (m2, &(p2, q2)) in l2.support().offsets().iter().enumerate() {
                let m = s5.offsets().iter().position(|&o| o == (p1 + p2, q1 + q2)).unwrap();
                for o in 0..3 {
                    for i in 0..2 {
                        let mut acc = composed.get(o, i, m);
                        for h in 0..4 {
                            acc += l2.get(o, h, m2) * l1.get(h, i, m1);
                        }
                        composed.set(o, i, m, acc);
                    }
                }
            }
        }
        let x = rand_stack(12, 12, 2, 11);
        let two = conv2d_same(&conv2d_same(&x, &l1).unwrap(), &l2).unwrap();
        let one = conv2d_same(&x, &composed).unwrap();
        // zero padding of the hidden layer only matters within two pixels of the edge
        for k1 in 2..10 {
            for k2 in 2..10 {
                for o in 0..3 {
                    assert!((two.get(k1, k2, o) - one.get(k1, k2, o)).abs() < 1e-10);
                }
            }
        }
    }
}

//! RAKI: per output channel, a three-layer convolutional network on the
//! real-split zero-filled data whose last layer has one output per local
//! sampling configuration; each unsampled location reads the output of
//! its own configuration.

use std::collections::HashSet;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{KSpace, RealChannelStack};
use crate::kspace::split_complex_to_real;
use crate::loraki::Activation;
use crate::neuralk::{adam_step, decayed_rate, conv2d_same, relu, AdamConfig, AdamState, ConvLayer, Graph, ParamSet};
use crate::sampling::{enumerate_local_configs, extract_acs, local_config, LocalConfigSet, SamplingMask};
use crate::scalar::Real;
use crate::support::{KernelSupport, Offset};

/// Layer widths, kernel sizes (readout x phase) and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RakiHyper {
    pub c1: usize,
    pub c2: usize,
    pub kernel1: (usize, usize),
    pub kernel2: (usize, usize),
    pub kernel3: (usize, usize),
    /// Neighbourhood used to classify sampling configurations; defaults
    /// to the composite receptive field.
    pub config_kernel: Option<(usize, usize)>,
    pub activation: Activation,
    pub steps: usize,
    pub optimizer: AdamConfig,
    /// Learning rate at the last step relative to the first; the rate
    /// decays geometrically in between.
    pub final_lr_fraction: f64,
    /// Windows per optimizer step (gradients averaged).
    pub batch: usize,
    /// Distinct translated mask windows used as training inputs.
    pub windows: usize,
}

impl Default for RakiHyper {
    fn default() -> Self {
        Self {
            c1: 32,
            c2: 8,
            kernel1: (5, 5),
            kernel2: (1, 1),
            kernel3: (3, 3),
            config_kernel: None,
            activation: Activation::Relu,
            steps: 1000,
            optimizer: AdamConfig::default(),
            final_lr_fraction: 1.0,
            batch: 1,
            windows: 8,
        }
    }
}

impl RakiHyper {
    /// Extent of the composite receptive field.
    pub fn receptive_field(&self) -> (usize, usize) {
        (
            self.kernel1.0 + self.kernel2.0 + self.kernel3.0 - 2,
            self.kernel1.1 + self.kernel2.1 + self.kernel3.1 - 2,
        )
    }

    pub fn config_support(&self) -> Result<KernelSupport> {
        let (r1, r2) = self.config_kernel.unwrap_or_else(|| self.receptive_field());
        KernelSupport::rectangular(r1, r2)
    }

    fn supports(&self) -> Result<[KernelSupport; 3]> {
        Ok([
            KernelSupport::rectangular(self.kernel1.0, self.kernel1.1)?,
            KernelSupport::rectangular(self.kernel2.0, self.kernel2.1)?,
            KernelSupport::rectangular(self.kernel3.0, self.kernel3.1)?,
        ])
    }
}

/// Trained RAKI networks, one per real output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RakiNet<T> {
    hyper: RakiHyper,
    configs: Vec<Vec<Offset>>,
    /// Whether each configuration appeared in a training window.
    trained: Vec<bool>,
    nets: Vec<ParamSet<T>>,
}

impl<T: Real> RakiNet<T> {
    pub fn from_parts(hyper: RakiHyper, configs: Vec<Vec<Offset>>, trained: Vec<bool>, nets: Vec<ParamSet<T>>) -> Result<Self> {
        let j = configs.len();
        if trained.len() != j {
            return Err(Error::Dimension("one training flag per configuration required".into()));
        }
        if nets.is_empty() || nets.len() % 2 != 0 {
            return Err(Error::Dimension(format!("{} channel networks, expected an even count", nets.len())));
        }
        let real = nets.len();
        for net in &nets {
            let [f1, f2, f3] = match net.layers.as_slice() {
                [a, b, c] => [a, b, c],
                _ => return Err(Error::Dimension("each channel network has three layers".into())),
            };
            let chain = [
                (f1.in_channels(), real),
                (f1.out_channels(), hyper.c1),
                (f2.in_channels(), hyper.c1),
                (f2.out_channels(), hyper.c2),
                (f3.in_channels(), hyper.c2),
                (f3.out_channels(), j),
            ];
            if chain.iter().any(|(a, b)| a != b) || !net.scalars.is_empty() {
                return Err(Error::Dimension("RAKI layer widths do not chain".into()));
            }
        }
        Ok(Self {
            hyper,
            configs,
            trained,
            nets,
        })
    }

    pub fn hyper(&self) -> &RakiHyper {
        &self.hyper
    }

    pub fn configs(&self) -> &[Vec<Offset>] {
        &self.configs
    }

    pub fn trained(&self) -> &[bool] {
        &self.trained
    }

    /// Parameters of the network predicting real channel `l`.
    pub fn channel(&self, l: usize) -> &ParamSet<T> {
        &self.nets[l]
    }

    pub fn nets(&self) -> &[ParamSet<T>] {
        &self.nets
    }

    /// Physical (complex) coils.
    pub fn coils(&self) -> usize {
        self.nets.len() / 2
    }
}

/// One training input: the ACS block seen through a translated window of
/// the acquisition mask.
#[derive(Clone, Debug)]
struct Window<T> {
    input: RealChannelStack<T>,
    labels: Rc<[i32]>,
    weights: Vec<f64>,
}

/// Per-target weights giving every configuration present equal total
/// weight, so rare configurations (edges, ACS borders) are fitted as
/// carefully as common ones, as separate least-squares fits would.
fn balanced_weights(labels: &[i32]) -> Vec<f64> {
    let mut counts = std::collections::HashMap::new();
    for &l in labels.iter().filter(|&&l| l >= 0) {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let groups = counts.len() as f64;
    labels
        .iter()
        .map(|l| counts.get(l).map_or(0.0, |&c| 1.0 / (c as f64 * groups)))
        .collect()
}

/// `sum_k w_k (pred_k - target_k)^2` and its gradient.
fn weighted_loss<T: Real>(
    pred: &RealChannelStack<T>,
    target: &RealChannelStack<T>,
    weights: &[f64],
) -> Result<(T, RealChannelStack<T>)> {
    if pred.dims() != target.dims() || weights.len() != pred.data().len() {
        return Err(Error::Dimension("loss operands differ in shape".into()));
    }
    let mut loss = T::zero();
    let mut grad = RealChannelStack::zeros(pred.n1(), pred.n2(), pred.channels());
    for (((&p, &t), &w), g) in pred.data().iter().zip(target.data()).zip(weights).zip(grad.data_mut()) {
        if w > 0.0 {
            let (w, r) = (T::lit(w), p - t);
            loss += w * r * r;
            *g = T::lit(2.0) * w * r;
        }
    }
    Ok((loss, grad))
}

fn candidate_windows(mask: &SamplingMask, m1: usize, m2: usize) -> Vec<(usize, usize)> {
    const MAX_CANDIDATES: usize = 4096;
    let (c1, c2) = (mask.n1() - m1 + 1, mask.n2() - m2 + 1);
    let stride = ((c1 * c2) as f64 / MAX_CANDIDATES as f64).sqrt().ceil().max(1.0) as usize;
    let s1 = stride.min(c1.max(1));
    let s2 = stride.min(c2.max(1));
    let mut out = Vec::new();
    for o1 in (0..c1).step_by(s1) {
        for o2 in (0..c2).step_by(s2) {
            out.push((o1, o2));
        }
    }
    out
}

/// Labels of every unsampled location of a standalone window, mapped to
/// the global configuration list (`-1` when absent).
fn window_labels(window: &SamplingMask, support: &KernelSupport, configs: &[Vec<Offset>]) -> Vec<i32> {
    let (n1, n2) = (window.n1(), window.n2());
    let mut labels = vec![-1; n1 * n2];
    for k1 in 0..n1 {
        for k2 in 0..n2 {
            if window.is_sampled(k1, k2) {
                continue;
            }
            let lambda = local_config(window, support, k1, k2);
            if let Some(j) = configs.iter().position(|c| *c == lambda) {
                labels[k1 * n2 + k2] = j as i32;
            }
        }
    }
    labels
}

/// Distinct windows, chosen greedily to cover as many configurations as
/// possible, then topped up in seeded random order.
fn select_windows(
    mask: &SamplingMask,
    dims: (usize, usize),
    support: &KernelSupport,
    configs: &[Vec<Offset>],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<i32>>, Vec<Vec<bool>>)> {
    let (m1, m2) = dims;
    let mut seen = HashSet::new();
    let mut pool: Vec<(Vec<bool>, Vec<i32>)> = Vec::new();
    for (o1, o2) in candidate_windows(mask, m1, m2) {
        let w = mask.window(o1..o1 + m1, o2..o2 + m2)?;
        if !seen.insert(w.sampled().to_vec()) {
            continue;
        }
        let labels = window_labels(&w, support, configs);
        if labels.iter().any(|&l| l >= 0) {
            pool.push((w.sampled().to_vec(), labels));
        }
    }
    pool.shuffle(rng);
    let mut covered = vec![false; configs.len()];
    let mut chosen = Vec::new();
    let mut taken = vec![false; pool.len()];
    while chosen.len() < count {
        let gain = |labels: &[i32]| {
            labels
                .iter()
                .filter(|&&l| l >= 0 && !covered[l as usize])
                .map(|&l| l)
                .collect::<HashSet<_>>()
                .len()
        };
        let best = (0..pool.len())
            .filter(|&i| !taken[i])
            .max_by_key(|&i| (gain(&pool[i].1), std::cmp::Reverse(i)));
        let Some(i) = best else { break };
        taken[i] = true;
        for &l in &pool[i].1 {
            if l >= 0 {
                covered[l as usize] = true;
            }
        }
        chosen.push(i);
    }
    let labels = chosen.iter().map(|&i| pool[i].1.clone()).collect();
    let masks = chosen.iter().map(|&i| pool[i].0.clone()).collect();
    Ok((labels, masks))
}

fn record<T: Real>(
    graph: &mut Graph<T>,
    params: &ParamSet<T>,
    input: RealChannelStack<T>,
    labels: Rc<[i32]>,
    activation: Activation,
) -> Result<usize> {
    let act = |g: &mut Graph<T>, x| match activation {
        Activation::Relu => g.relu(x),
        Activation::Identity => x,
    };
    let x = graph.input(input);
    let h = graph.conv(params, x, 0)?;
    let h = act(graph, h);
    let h = graph.conv(params, h, 1)?;
    let h = act(graph, h);
    let h = graph.conv(params, h, 2)?;
    graph.select(h, labels)
}

/// Configuration-balanced squared-error loss on the labelled targets of real channel `l` and its
/// parameter gradient.
pub fn raki_loss_and_grad<T: Real>(
    params: &ParamSet<T>,
    input: &RealChannelStack<T>,
    target: &RealChannelStack<T>,
    labels: &[i32],
    activation: Activation,
) -> Result<(T, ParamSet<T>)> {
    let mut graph = Graph::new();
    let out = record(&mut graph, params, input.clone(), labels.into(), activation)?;
    let (loss, up) = weighted_loss(graph.value(out), target, &balanced_weights(labels))?;
    let grads = graph.backward(params, out, &up)?;
    Ok((loss, grads.params))
}

/// Fresh channel network for `real` input channels and `j` configurations.
pub fn init_channel_net<T: Real, R: Rng>(hyper: &RakiHyper, real: usize, j: usize, rng: &mut R) -> Result<ParamSet<T>> {
    let [s1, s2, s3] = hyper.supports()?;
    let layers = vec![
        ConvLayer::kaiming(real, hyper.c1, s1, 1.0, rng),
        ConvLayer::kaiming(hyper.c1, hyper.c2, s2, 1.0, rng),
        ConvLayer::kaiming(hyper.c2, j, s3, 1.0, rng),
    ];
    Ok(ParamSet {
        layers,
        scalars: Vec::new(),
    })
}

/// Trained networks and per-channel loss curves.
#[derive(Clone, Debug)]
pub struct RakiTraining<T> {
    pub net: RakiNet<T>,
    pub losses: Vec<Vec<T>>,
}

/// Trains the per-channel networks on the ACS block. Training inputs are
/// the ACS block masked by translated windows of `mask`, so each window
/// reproduces the acquisition's local sampling patterns; targets are the
/// ACS values at the window's unsampled locations.
pub fn train_raki<T: Real>(
    acs: &KSpace<T>,
    mask: &SamplingMask,
    configs: &LocalConfigSet,
    hyper: &RakiHyper,
    seed: u64,
) -> Result<RakiTraining<T>> {
    acs.ensure_finite("ACS data")?;
    let (m1, m2, nc) = acs.dims();
    let (f1, f2) = hyper.receptive_field();
    if m1 < f1 || m2 < f2 || m1 > mask.n1() || m2 > mask.n2() {
        return Err(Error::InvalidParameter(format!(
            "ACS block {m1}x{m2} cannot hold the {f1}x{f2} receptive field"
        )));
    }
    if configs.dims() != (mask.n1(), mask.n2()) {
        return Err(Error::Dimension("configuration map and mask sizes differ".into()));
    }
    if configs.is_empty() {
        return Err(Error::InvalidParameter("nothing to interpolate".into()));
    }
    if hyper.batch == 0 || !(hyper.final_lr_fraction > 0.0) {
        return Err(Error::InvalidParameter("batch and final learning-rate fraction must be positive".into()));
    }
    if hyper.windows == 0 {
        return Err(Error::InvalidParameter("at least one training window required".into()));
    }
    let support = hyper.config_support()?;
    let list = configs.configs().to_vec();
    let j = list.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (labels, masks) = select_windows(mask, (m1, m2), &support, &list, hyper.windows, &mut rng)?;
    if labels.is_empty() {
        return Err(Error::InvalidParameter("no window of the mask has a configured target".into()));
    }
    let mut trained = vec![false; j];
    for l in labels.iter().flatten() {
        if *l >= 0 {
            trained[*l as usize] = true;
        }
    }

    // unit-RMS scaling; the networks are positively homogeneous
    let rms = (acs.energy() / T::from_count(acs.data().len())).sqrt();
    if !(rms > T::zero()) {
        return Err(Error::InvalidParameter("ACS block is identically zero".into()));
    }
    let mut scaled = acs.clone();
    scaled.scale(T::one() / rms);
    let full = split_complex_to_real(&scaled);
    let real = 2 * nc;
    let windows: Vec<Window<T>> = labels
        .into_iter()
        .zip(masks)
        .map(|(lab, m)| {
            let mut input = full.clone();
            for (k, &s) in m.iter().enumerate() {
                if !s {
                    input.data_mut()[k * real..(k + 1) * real].fill(T::zero());
                }
            }
            Window {
                input,
                weights: balanced_weights(&lab),
                labels: lab.into(),
            }
        })
        .collect();

    let mut nets = Vec::with_capacity(real);
    let mut losses = Vec::with_capacity(real);
    for l in 0..real {
        let mut params = init_channel_net(hyper, real, j, &mut rng)?;
        let target = RealChannelStack::from_vec(m1, m2, 1, full.channel(l))?;
        let mut state = AdamState::new(hyper.optimizer, params.len());
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut cursor = order.len();
        let mut curve = Vec::with_capacity(hyper.steps);
        let inv_batch = T::one() / T::from_count(hyper.batch);
        for step in 0..hyper.steps {
            state.config.learning_rate = decayed_rate(&hyper.optimizer, hyper.final_lr_fraction, step, hyper.steps);
            let mut grads = params.zeros_like();
            let mut loss = T::zero();
            for _ in 0..hyper.batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let w = &windows[order[cursor]];
                cursor += 1;
                let mut graph = Graph::new();
                let out = record(&mut graph, &params, w.input.clone(), w.labels.clone(), hyper.activation)?;
                let (l, up) = weighted_loss(graph.value(out), &target, &w.weights)?;
                loss += l;
                grads.accumulate(&graph.backward(&params, out, &up)?.params);
            }
            loss *= inv_batch;
            grads.scale(inv_batch);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            curve.push(loss);
            adam_step(&mut params, &grads, &mut state)?;
        }
        nets.push(params);
        losses.push(curve);
    }
    let net = RakiNet::from_parts(hyper.clone(), list, trained, nets)?;
    Ok(RakiTraining { net, losses })
}

/// `d_zp + sum_j g_j * f3(relu(f2(relu(f1(d_zp)))))_j` per output channel.
/// Configurations that never occurred in training are left zero-filled.
pub fn apply_raki<T: Real>(d_zp: &KSpace<T>, net: &RakiNet<T>, configs: &LocalConfigSet) -> Result<KSpace<T>> {
    let (n1, n2, nc) = d_zp.dims();
    if configs.dims() != (n1, n2) {
        return Err(Error::Dimension("data and configuration map sizes differ".into()));
    }
    if net.coils() != nc {
        return Err(Error::Dimension(format!("networks trained for {} coils, data has {nc}", net.coils())));
    }
    let map: Vec<Option<usize>> = configs
        .configs()
        .iter()
        .map(|lambda| {
            net.configs
                .iter()
                .position(|c| c == lambda)
                .ok_or_else(|| Error::MissingConfig(format!("{lambda:?}")))
                .map(|j| net.trained[j].then_some(j))
        })
        .collect::<Result<_>>()?;
    let x = split_complex_to_real(d_zp);
    let mut out = x.clone();
    let act = |h: RealChannelStack<T>| match net.hyper.activation {
        Activation::Relu => relu(&h),
        Activation::Identity => h,
    };
    let jn = net.configs.len();
    for (l, params) in net.nets.iter().enumerate() {
        let h = act(conv2d_same(&x, &params.layers[0])?);
        let h = act(conv2d_same(&h, &params.layers[1])?);
        let h = conv2d_same(&h, &params.layers[2])?;
        for (k, &lab) in configs.labels().iter().enumerate() {
            if lab < 0 {
                continue;
            }
            if let Some(j) = map[lab as usize] {
                out.data_mut()[k * 2 * nc + l] = h.data()[k * jn + j];
            }
        }
    }
    let mut rec = crate::kspace::merge_real_to_complex(&out)?;
    // acquired samples verbatim
    for (k, &lab) in configs.labels().iter().enumerate() {
        if lab < 0 {
            rec.data_mut()[k * nc..(k + 1) * nc].copy_from_slice(&d_zp.data()[k * nc..(k + 1) * nc]);
        }
    }
    Ok(rec)
}

/// Trains on the mask's ACS block and fills the unsampled locations.
pub fn raki_reconstruct<T: Real>(
    d_zp: &KSpace<T>,
    mask: &SamplingMask,
    hyper: &RakiHyper,
    seed: u64,
) -> Result<(KSpace<T>, RakiTraining<T>)> {
    let configs = enumerate_local_configs(mask, &hyper.config_support()?);
    if configs.is_empty() {
        return Err(Error::InvalidParameter("nothing to interpolate".into()));
    }
    let acs = extract_acs(d_zp, mask)?;
    let training = train_raki(&acs, mask, &configs, hyper, seed)?;
    let rec = apply_raki(d_zp, &training.net, &configs)?;
    Ok((rec, training))
}

#[cfg(test)]
mod tests {
    use num_complex::Complex;

    use super::*;
    use crate::grappa::train_grappa;
    use crate::neuralk::finite_diff_grad;
    use crate::sampling::{apply_mask, uniform_mask};

    fn rand_c(rng: &mut ChaCha8Rng) -> Complex<f64> {
        Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    }

    fn rand_kspace(n1: usize, n2: usize, c: usize, seed: u64) -> KSpace<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KSpace::from_fn(n1, n2, c, |_, _, _| rand_c(&mut rng))
    }

    /// Rows obeying `z_c[k2] = phase_c^k2 z_c[0]` mixed across coils.
    fn planted(n1: usize, n2: usize, nc: usize, seed: u64) -> KSpace<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases: Vec<Complex<f64>> = (0..nc).map(|_| Complex::from_polar(1.0, rng.gen_range(-3.0..3.0))).collect();
        let mix: Vec<Complex<f64>> = (0..nc * nc).map(|_| rand_c(&mut rng)).collect();
        let starts: Vec<Complex<f64>> = (0..n1 * nc).map(|_| rand_c(&mut rng)).collect();
        KSpace::from_fn(n1, n2, nc, |k1, k2, l| {
            (0..nc).map(|c| mix[l * nc + c] * phases[c].powu(k2 as u32) * starts[k1 * nc + c]).sum()
        })
    }

    fn small_hyper() -> RakiHyper {
        RakiHyper {
            c1: 4,
            c2: 3,
            kernel1: (3, 3),
            kernel2: (1, 1),
            kernel3: (3, 3),
            config_kernel: None,
            steps: 40,
            windows: 4,
            ..Default::default()
        }
    }

    fn setup(seed: u64) -> (KSpace<f64>, SamplingMask, LocalConfigSet, KSpace<f64>) {
        let full = rand_kspace(16, 24, 1, seed);
        let mask = uniform_mask(16, 24, 2, 10).unwrap();
        let configs = enumerate_local_configs(&mask, &small_hyper().config_support().unwrap());
        let acs = extract_acs(&full, &mask).unwrap();
        (full, mask, configs, acs)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = small_hyper();
            let params: ParamSet<f64> = init_channel_net(&h, 2, 3, &mut rng).unwrap();
            let input = RealChannelStack::from_fn(8, 8, 2, |_, _, _| rng.gen_range(-1.0..1.0));
            let target = RealChannelStack::from_fn(8, 8, 1, |_, _, _| rng.gen_range(-1.0..1.0));
            let labels: Vec<i32> = (0..64).map(|_| rng.gen_range(-1..3)).collect();
            let (_, g) = raki_loss_and_grad(&params, &input, &target, &labels, Activation::Relu).unwrap();
            let fd = finite_diff_grad(
                |p| raki_loss_and_grad(p, &input, &target, &labels, Activation::Relu).unwrap().0,
                &params,
                1e-5,
            );
            let (a, b) = (g.flatten(), fd.flatten());
            let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-4 * scale, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (_, mask, configs, acs) = setup(1);
        let a = train_raki(&acs, &mask, &configs, &small_hyper(), 5).unwrap();
        let b = train_raki(&acs, &mask, &configs, &small_hyper(), 5).unwrap();
        assert_eq!(a.net, b.net);
        for curve in &a.losses {
            let head: f64 = curve[..4].iter().sum();
            let tail: f64 = curve[curve.len() - 4..].iter().sum();
            assert!(tail < head, "{head} -> {tail}");
        }
        let c = train_raki(&acs, &mask, &configs, &small_hyper(), 6).unwrap();
        assert_ne!(a.net, c.net);
    }

    #[test]
    fn acs_smaller_than_receptive_field_is_rejected() {
        let (_, mask, configs, _) = setup(2);
        let tiny = rand_kspace(16, 4, 1, 0);
        assert!(train_raki(&tiny, &mask, &configs, &small_hyper(), 0).is_err());
    }

    #[test]
    fn sampled_entries_kept_and_full_input_identity() {
        let (full, mask, configs, acs) = setup(3);
        let net = train_raki(&acs, &mask, &configs, &small_hyper(), 1).unwrap().net;
        let d_zp = apply_mask(&full, &mask).unwrap();
        let rec = apply_raki(&d_zp, &net, &configs).unwrap();
        for k1 in 0..16 {
            for k2 in 0..24 {
                if mask.is_sampled(k1, k2) {
                    assert_eq!(rec.pixel(k1, k2), d_zp.pixel(k1, k2));
                }
            }
        }
        let none = enumerate_local_configs(&SamplingMask::full(16, 24), &KernelSupport::rectangular(3, 3).unwrap());
        assert_eq!(apply_raki(&full, &net, &none).unwrap(), full);
        assert!(apply_raki(&rand_kspace(16, 24, 2, 0), &net, &configs).is_err());
    }

    /// Identity activations with a GRAPPA kernel in the first layer and
    /// pass-through later layers reproduce GRAPPA exactly.
    #[test]
    fn linear_collapse_reproduces_grappa() {
        let nc = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let full = KSpace::from_fn(20, 30, nc, |_, _, _| rand_c(&mut rng));
        let mask = uniform_mask(20, 30, 3, 12).unwrap();
        let s5 = KernelSupport::rectangular(5, 5).unwrap();
        let configs = enumerate_local_configs(&mask, &s5);
        let kernels = train_grappa(&extract_acs(&full, &mask).unwrap(), &configs, (5, 5)).unwrap();
        let j = configs.len();
        let hyper = RakiHyper {
            c1: j,
            c2: j,
            kernel1: (5, 5),
            kernel2: (1, 1),
            kernel3: (3, 3),
            config_kernel: Some((5, 5)),
            activation: Activation::Identity,
            ..Default::default()
        };
        let [_, sup2, sup3] = hyper.supports().unwrap();
        let centre = sup3.offsets().iter().position(|&o| o == (0, 0)).unwrap();
        let mut nets = Vec::new();
        for lr in 0..2 * nc {
            let (l, imag) = (lr / 2, lr % 2 == 1);
            let mut f1 = ConvLayer::zeros(2 * nc, j, s5.clone());
            for (jj, lambda) in configs.configs().iter().enumerate() {
                for (mi, off) in lambda.iter().enumerate() {
                    let si = s5.offsets().iter().position(|o| o == off).unwrap();
                    for c in 0..nc {
                        let w = kernels.weight(jj, mi, c, l);
                        let (a, b) = if imag { (w.im, w.re) } else { (w.re, -w.im) };
                        f1.set(jj, 2 * c, si, a);
                        f1.set(jj, 2 * c + 1, si, b);
                    }
                }
            }
            let mut f2 = ConvLayer::zeros(j, j, sup2.clone());
            let mut f3 = ConvLayer::zeros(j, j, sup3.clone());
            for jj in 0..j {
                f2.set(jj, jj, 0, 1.0);
                f3.set(jj, jj, centre, 1.0);
            }
            nets.push(ParamSet { layers: vec![f1, f2, f3], scalars: vec![] });
        }
        let net = RakiNet::from_parts(hyper, configs.configs().to_vec(), vec![true; j], nets).unwrap();
        let d_zp = apply_mask(&full, &mask).unwrap();
        let a = apply_raki(&d_zp, &net, &configs).unwrap();
        let b = crate::grappa::apply_grappa(&d_zp, &kernels, &configs).unwrap();
        assert!(a.relative_error(&b) < 1e-8, "{}", a.relative_error(&b));
    }

    #[test]
    fn identity_activation_gives_linear_map() {
        let (full, mask, configs, acs) = setup(4);
        let hyper = RakiHyper { activation: Activation::Identity, ..small_hyper() };
        let net = train_raki(&acs, &mask, &configs, &hyper, 2).unwrap().net;
        let x = apply_mask(&full, &mask).unwrap();
        let y = apply_mask(&rand_kspace(16, 24, 1, 40), &mask).unwrap();
        let mut comb = x.clone();
        for (c, (&a, &b)) in comb.data_mut().iter_mut().zip(x.data().iter().zip(y.data())) {
            *c = a * 2.0 - b * 0.5;
        }
        let (fx, fy, fc) = (
            apply_raki(&x, &net, &configs).unwrap(),
            apply_raki(&y, &net, &configs).unwrap(),
            apply_raki(&comb, &net, &configs).unwrap(),
        );
        for i in 0..fc.data().len() {
            let want = fx.data()[i] * 2.0 - fy.data()[i] * 0.5;
            assert!((fc.data()[i] - want).norm() < 1e-10);
        }
    }

    /// Relative error over targets at least `margin` away from the grid edge.
    fn interior_error(a: &KSpace<f64>, b: &KSpace<f64>, margin: usize) -> f64 {
        let (n1, n2, nc) = a.dims();
        let (mut e, mut t) = (0.0, 0.0);
        for k1 in margin..n1 - margin {
            for k2 in margin..n2 - margin {
                for c in 0..nc {
                    e += (a.get(k1, k2, c) - b.get(k1, k2, c)).norm_sqr();
                    t += b.get(k1, k2, c).norm_sqr();
                }
            }
        }
        (e / t).sqrt()
    }

    #[test]
    fn planted_linear_relation_versus_grappa() {
        let full = planted(16, 40, 1, 3);
        let mask = uniform_mask(16, 40, 2, 16).unwrap();
        let d_zp = apply_mask(&full, &mask).unwrap();
        let gc = enumerate_local_configs(&mask, &KernelSupport::rectangular(3, 3).unwrap());
        let kernels = train_grappa(&extract_acs(&d_zp, &mask).unwrap(), &gc, (3, 3)).unwrap();
        let g = crate::grappa::apply_grappa(&d_zp, &kernels, &gc).unwrap();
        let eg = interior_error(&g, &full, 2);
        let hyper = RakiHyper {
            c1: 8,
            c2: 8,
            kernel1: (3, 3),
            kernel2: (1, 1),
            kernel3: (3, 3),
            steps: 1500,
            batch: 4,
            windows: 4,
            final_lr_fraction: 1e-2,
            activation: Activation::Identity,
            ..Default::default()
        };
        let (lin, _) = raki_reconstruct(&d_zp, &mask, &hyper, 1).unwrap();
        let el = interior_error(&lin, &full, 2);
        assert!(el <= eg + 1e-3, "linear raki {el} grappa {eg}");
        let (nl, _) = raki_reconstruct(&d_zp, &mask, &RakiHyper { activation: Activation::Relu, ..hyper }, 1).unwrap();
        let en = interior_error(&nl, &full, 2);
        let ez = interior_error(&d_zp, &full, 2);
        assert!(en < 0.5 * ez, "relu raki {en} zero-filled {ez}");
    }
}

//! The unrolled LORAKI network: `K` weight-shared iterations of
//! `d <- U(d - lambda g2(relu(g1(d)))) + d_zp` on real-split, conjugate-augmented
//! k-space, its ACS training pipeline and synthetic-ACS bootstrapping.

use std::rc::Rc;

use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{KSpace, RealChannelStack};
use crate::kspace::{merge_real_to_complex, split_complex_to_real, vcc_augment};
use crate::loraks::{ac_loraks_reconstruct, symmetric_acs_block, AcLoraksSettings, NullspaceBasis};
use crate::neuralk::{adam_step, conv2d_same, decayed_rate, mse_loss, relu, AdamConfig, AdamState, ConvLayer, Graph, NodeId, ParamSet};
use crate::sampling::{ConsistencyMask, MaskStyle, SamplingMask};
use crate::scalar::Real;
use crate::support::{KernelSupport, SupportShape};

/// Nonlinearity between the two convolution layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// No nonlinearity: the network is a linear Landweber-type recursion.
    Identity,
}

/// Initialization of the output layer `g2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OutputInit {
    /// Scaled uniform initialization with the given gain.
    Kaiming { gain: f64 },
    /// All zeros: the untrained network returns its input.
    Zero,
}

const G1: usize = 0;
const G2: usize = 1;
const STEP: usize = 0;

/// Trained (or template) LORAKI parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LorakiNetwork<T> {
    params: ParamSet<T>,
    iterations: usize,
    activation: Activation,
}

impl<T: Real> LorakiNetwork<T> {
    pub fn from_parts(g1: ConvLayer<T>, g2: ConvLayer<T>, lambda: T, iterations: usize, activation: Activation) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::InvalidParameter("LORAKI needs at least one iteration".into()));
        }
        if g1.out_channels() != g2.in_channels() || g1.in_channels() != g2.out_channels() {
            return Err(Error::Dimension(format!(
                "layer chain {}->{} then {}->{} does not close",
                g1.in_channels(),
                g1.out_channels(),
                g2.in_channels(),
                g2.out_channels()
            )));
        }
        if !lambda.is_finite() {
            return Err(Error::NonFinite("LORAKI step scale"));
        }
        Ok(Self {
            params: ParamSet {
                layers: vec![g1, g2],
                scalars: vec![lambda],
            },
            iterations,
            activation,
        })
    }

    /// Freshly initialized network on `channels` real channels.
    pub fn init<R: Rng>(
        channels: usize,
        hidden: usize,
        support: KernelSupport,
        iterations: usize,
        lambda: T,
        output_init: OutputInit,
        rng: &mut R,
    ) -> Result<Self> {
        let g1 = ConvLayer::kaiming(channels, hidden, support.clone(), 1.0, rng);
        let g2 = match output_init {
            OutputInit::Kaiming { gain } => ConvLayer::kaiming(hidden, channels, support, gain, rng),
            OutputInit::Zero => ConvLayer::zeros(hidden, channels, support),
        };
        Self::from_parts(g1, g2, lambda, iterations, Activation::Relu)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::InvalidParameter("LORAKI needs at least one iteration".into()));
        }
        self.iterations = iterations;
        Ok(self)
    }

    pub fn g1(&self) -> &ConvLayer<T> {
        &self.params.layers[G1]
    }

    pub fn g2(&self) -> &ConvLayer<T> {
        &self.params.layers[G2]
    }

    pub fn lambda(&self) -> T {
        self.params.scalars[STEP]
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Real channels of the state (`4L`).
    pub fn channels(&self) -> usize {
        self.g1().in_channels()
    }

    pub fn hidden(&self) -> usize {
        self.g1().out_channels()
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamSet<T>) -> Result<()> {
        if !params.same_layout(&self.params) {
            return Err(Error::Dimension("parameter layout differs from the network".into()));
        }
        self.params = params;
        Ok(())
    }
}

/// `x` where the mask is clear, `d_zp` where it is set.
pub fn data_consistency<T: Real>(
    x: &RealChannelStack<T>,
    mask: &ConsistencyMask,
    d_zp: &RealChannelStack<T>,
) -> Result<RealChannelStack<T>> {
    if x.dims() != d_zp.dims() || mask.dims() != x.dims() {
        return Err(Error::Dimension("data consistency operands differ in shape".into()));
    }
    let mut out = x.clone();
    for ((v, &r), &m) in out.data_mut().iter_mut().zip(d_zp.data()).zip(mask.sampled()) {
        if m {
            *v = r;
        }
    }
    Ok(out)
}

fn check_state<T: Real>(d_zp: &RealChannelStack<T>, mask: &ConsistencyMask, net: &LorakiNetwork<T>) -> Result<()> {
    if d_zp.channels() != net.channels() {
        return Err(Error::Dimension(format!(
            "network expects {} channels, data has {}",
            net.channels(),
            d_zp.channels()
        )));
    }
    if mask.dims() != d_zp.dims() {
        return Err(Error::Dimension("consistency mask does not match the data".into()));
    }
    Ok(())
}

/// Runs the `K` unrolled iterations from `d_zp`.
pub fn loraki_forward<T: Real>(
    d_zp: &RealChannelStack<T>,
    mask: &ConsistencyMask,
    net: &LorakiNetwork<T>,
) -> Result<RealChannelStack<T>> {
    loraki_iterates(d_zp, mask, net).map(|mut v| v.pop().expect("at least one iterate"))
}

/// Every iterate `d^(1) .. d^(K)`.
pub fn loraki_iterates<T: Real>(
    d_zp: &RealChannelStack<T>,
    mask: &ConsistencyMask,
    net: &LorakiNetwork<T>,
) -> Result<Vec<RealChannelStack<T>>> {
    check_state(d_zp, mask, net)?;
    let lambda = net.lambda();
    let mut d = d_zp.clone();
    let mut out = Vec::with_capacity(net.iterations);
    for _ in 0..net.iterations {
        let h = conv2d_same(&d, net.g1())?;
        let h = match net.activation {
            Activation::Relu => relu(&h),
            Activation::Identity => h,
        };
        let u = conv2d_same(&h, net.g2())?;
        for (((v, &g), &m), &r) in d.data_mut().iter_mut().zip(u.data()).zip(mask.sampled()).zip(d_zp.data()) {
            *v = if m { r } else { *v - lambda * g };
        }
        out.push(d.clone());
    }
    Ok(out)
}

/// Records the unrolled network on `graph` and returns the output node.
pub fn record_forward<T: Real>(
    graph: &mut Graph<T>,
    params: &ParamSet<T>,
    d_zp: NodeId,
    mask: Rc<[bool]>,
    iterations: usize,
    activation: Activation,
) -> Result<NodeId> {
    let mut d = d_zp;
    for _ in 0..iterations {
        let h = graph.conv(params, d, G1)?;
        let h = match activation {
            Activation::Relu => graph.relu(h),
            Activation::Identity => h,
        };
        let u = graph.conv(params, h, G2)?;
        let s = graph.sub_scaled(params, d, u, STEP)?;
        d = graph.data_consistency(s, d_zp, mask.clone())?;
    }
    Ok(d)
}

/// Mean-squared training loss of `params` on one pair, and its gradient.
pub fn pair_loss_and_grad<T: Real>(
    params: &ParamSet<T>,
    pair: &TrainingPair<T>,
    iterations: usize,
    activation: Activation,
) -> Result<(T, ParamSet<T>)> {
    let mut graph = Graph::new();
    let x = graph.input(pair.input.clone());
    let out = record_forward(&mut graph, params, x, pair.consistency_rc(), iterations, activation)?;
    let (loss, up) = mse_loss(graph.value(out), &pair.target, None)?;
    let grads = graph.backward(params, out, &up)?;
    Ok((loss, grads.params))
}

/// Zero-filled input, fully sampled target and the training mask for one
/// synthetic undersampling of an ACS block.
#[derive(Clone, Debug)]
pub struct TrainingPair<T> {
    pub input: RealChannelStack<T>,
    pub target: RealChannelStack<T>,
    /// Physical-channel mask drawn for this pair, over the source grid.
    pub mask: SamplingMask,
    /// Per-entry consistency of `input` (conjugate-augmented, real-split).
    pub consistency: ConsistencyMask,
}

impl<T> TrainingPair<T> {
    fn consistency_rc(&self) -> Rc<[bool]> {
        self.consistency.sampled().into()
    }
}

/// Where training pairs are cut from.
#[derive(Clone, Debug)]
pub struct PairSource<'a, T: Real> {
    /// Physical-channel k-space; its center is the k-space origin.
    pub kspace: &'a KSpace<T>,
    /// Training patch size; `None` uses the whole source.
    pub patch: Option<(usize, usize)>,
}

/// Minimum ACS extent along each axis for training pairs.
pub const MIN_TRAINING_BLOCK: usize = 6;

/// Draws `count` masks of `style` over the source grid and cuts matching
/// (input, target) pairs, after conjugate augmentation and real splitting.
pub fn make_training_pairs<T: Real>(
    source: &PairSource<'_, T>,
    style: &MaskStyle,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainingPair<T>>> {
    let (n1, n2, nc) = source.kspace.dims();
    if n1 < MIN_TRAINING_BLOCK || n2 < MIN_TRAINING_BLOCK {
        return Err(Error::InvalidParameter(format!(
            "training block {n1}x{n2} is smaller than {MIN_TRAINING_BLOCK}x{MIN_TRAINING_BLOCK}"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidParameter("at least one training pair required".into()));
    }
    let (p1, p2) = source.patch.unwrap_or((n1, n2));
    if p1 > n1 || p2 > n2 || p1 < MIN_TRAINING_BLOCK || p2 < MIN_TRAINING_BLOCK {
        return Err(Error::InvalidParameter(format!(
            "training patch {p1}x{p2} does not fit the {n1}x{n2} source"
        )));
    }
    source.kspace.ensure_finite("training source")?;
    let full = split_complex_to_real(&vcc_augment(source.kspace));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let mask = style.draw(n1, n2, &mut rng)?;
        let o1 = rng.gen_range(0..=n1 - p1);
        let o2 = rng.gen_range(0..=n2 - p2);
        let consistency = ConsistencyMask::conjugate_augmented(&mask, nc)
            .split_real()
            .window(o1..o1 + p1, o2..o2 + p2)?;
        let target = full.crop(o1..o1 + p1, o2..o2 + p2)?;
        let mut input = target.clone();
        for (v, &m) in input.data_mut().iter_mut().zip(consistency.sampled()) {
            if !m {
                *v = T::zero();
            }
        }
        pairs.push(TrainingPair {
            input,
            target,
            mask,
            consistency,
        });
    }
    Ok(pairs)
}

/// Training-loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub optimizer: AdamConfig,
    /// Pairs per optimizer step (gradients averaged).
    pub batch: usize,
    pub train_lambda: bool,
    /// Learning rate at the last step relative to the first (geometric
    /// decay in between).
    pub final_lr_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            optimizer: AdamConfig::default(),
            batch: 1,
            train_lambda: true,
            final_lr_fraction: 1.0,
        }
    }
}

/// Trained network together with the per-step training loss.
#[derive(Clone, Debug)]
pub struct TrainingOutcome<T> {
    pub network: LorakiNetwork<T>,
    pub losses: Vec<T>,
}

/// Adam on the mean squared error between the network output and the
/// target over whole training blocks. Pairs are visited in a seeded
/// shuffled order, reshuffled every pass.
pub fn train_loraki<T: Real>(
    pairs: &[TrainingPair<T>],
    template: &LorakiNetwork<T>,
    config: &TrainingConfig,
    seed: u64,
) -> Result<TrainingOutcome<T>> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("no training pairs".into()));
    }
    if config.batch == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    for p in pairs {
        check_state(&p.input, &p.consistency, template)?;
    }
    let mut net = template.clone();
    let mut state = AdamState::new(config.optimizer, net.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps);
    let inv_batch = T::one() / T::from_count(config.batch);
    for step in 0..config.steps {
        state.config.learning_rate = decayed_rate(&config.optimizer, config.final_lr_fraction, step, config.steps);
        let mut grads = net.params.zeros_like();
        let mut loss = T::zero();
        for _ in 0..config.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let pair = &pairs[order[cursor]];
            cursor += 1;
            let (l, g) = pair_loss_and_grad(&net.params, pair, net.iterations, net.activation)?;
            loss += l;
            grads.accumulate(&g);
        }
        loss *= inv_batch;
        grads.scale(inv_batch);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        if !config.train_lambda {
            grads.scalars[STEP] = T::zero();
        }
        losses.push(loss);
        adam_step(&mut net.params, &grads, &mut state)?;
        if !net.params.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
    }
    Ok(TrainingOutcome { network: net, losses })
}

/// Applies a trained network to full-grid data: conjugate augmentation,
/// real split, the unrolled iterations, and back to the physical coils.
pub fn reconstruct_loraki<T: Real>(d_zp: &KSpace<T>, mask: &SamplingMask, net: &LorakiNetwork<T>) -> Result<KSpace<T>> {
    let (n1, n2, nc) = d_zp.dims();
    if (mask.n1(), mask.n2()) != (n1, n2) {
        return Err(Error::Dimension("mask and data sizes differ".into()));
    }
    if net.channels() != 4 * nc {
        return Err(Error::Dimension(format!(
            "network has {} real channels, {nc} coils need {}",
            net.channels(),
            4 * nc
        )));
    }
    let state = split_complex_to_real(&vcc_augment(d_zp));
    let consistency = ConsistencyMask::conjugate_augmented(mask, nc).split_real();
    let out = loraki_forward(&state, &consistency, net)?;
    let merged = merge_real_to_complex(&out)?;
    let mut rec = merged.select_channels(0..nc);
    // acquired samples are copied verbatim
    for (k, &s) in mask.sampled().iter().enumerate() {
        if s {
            rec.data_mut()[k * nc..(k + 1) * nc].copy_from_slice(&d_zp.data()[k * nc..(k + 1) * nc]);
        }
    }
    Ok(rec)
}

/// Full-grid AC-LORAKS reconstruction used as a synthetic ACS source.
pub fn synthesize_acs<T: Real>(d_zp: &KSpace<T>, mask: &SamplingMask, settings: &AcLoraksSettings) -> Result<KSpace<T>> {
    if mask.count() == mask.n1() * mask.n2() {
        return Ok(d_zp.clone());
    }
    ac_loraks_reconstruct(d_zp, mask, settings)
}

/// The ACS block trimmed to its reflection-symmetric core, so that its
/// conjugate augmentation matches that of the full grid.
pub fn acs_training_source<T: Real>(d_zp: &KSpace<T>, mask: &SamplingMask) -> Result<KSpace<T>> {
    let (r1, r2) = symmetric_acs_block(mask)?;
    d_zp.crop(r1, r2)
}

/// Linear network whose iterations reproduce Landweber AC-LORAKS with
/// nullspace `n` on conjugate-augmented data of `complex_channels` coils
/// (after real splitting): `g1` realizes `P(.) N` and `g2` realizes
/// `P*(. N^H)`, with `2C` real hidden channels.
pub fn linear_network_from_nullspace<T: Real>(
    n: &NullspaceBasis<T>,
    support: &KernelSupport,
    complex_channels: usize,
    step: T,
    iterations: usize,
) -> Result<LorakiNetwork<T>> {
    if n.rows() != support.len() * complex_channels {
        return Err(Error::Dimension("nullspace rows do not match support and channels".into()));
    }
    let c = n.dim();
    let real = 2 * complex_channels;
    let mut g1 = ConvLayer::zeros(real, 2 * c, support.clone());
    let mut g2 = ConvLayer::zeros(2 * c, real, support.clone());
    let nm = n.matrix();
    for (mi, &(p, q)) in support.offsets().iter().enumerate() {
        let mirrored = support
            .offsets()
            .iter()
            .position(|&o| o == (-p, -q))
            .ok_or_else(|| Error::InvalidParameter("support is not point-symmetric".into()))?;
        for ch in 0..complex_channels {
            for j in 0..c {
                let v: Complex<T> = nm[(mi * complex_channels + ch, j)];
                let (re, im) = (v.re, v.im);
                // z_j = sum d_c N: real block [[re, -im], [im, re]]
                g1.set(2 * j, 2 * ch, mi, re);
                g1.set(2 * j, 2 * ch + 1, mi, -im);
                g1.set(2 * j + 1, 2 * ch, mi, im);
                g1.set(2 * j + 1, 2 * ch + 1, mi, re);
                // y_c = sum z_j conj(N), placed at the mirrored offset
                g2.set(2 * ch, 2 * j, mirrored, re);
                g2.set(2 * ch, 2 * j + 1, mirrored, im);
                g2.set(2 * ch + 1, 2 * j, mirrored, -im);
                g2.set(2 * ch + 1, 2 * j + 1, mirrored, re);
            }
        }
    }
    LorakiNetwork::from_parts(g1, g2, step, iterations, Activation::Identity)
}

/// End-to-end LORAKI settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorakiSettings {
    pub hidden: usize,
    pub iterations: usize,
    pub kernel_r1: usize,
    pub kernel_r2: usize,
    pub shape: SupportShape,
    pub lambda_init: f64,
    pub output_init: OutputInit,
    pub training: TrainingConfig,
    pub pairs: usize,
    /// Training patch size when the source is a full synthetic grid.
    pub synthetic_patch: Option<(usize, usize)>,
}

impl Default for LorakiSettings {
    fn default() -> Self {
        Self {
            hidden: 64,
            iterations: 5,
            kernel_r1: 3,
            kernel_r2: 3,
            shape: SupportShape::Ellipsoidal,
            lambda_init: 1.0,
            output_init: OutputInit::Kaiming { gain: 0.1 },
            training: TrainingConfig::default(),
            pairs: 16,
            synthetic_patch: None,
        }
    }
}

impl LorakiSettings {
    pub fn support(&self) -> Result<KernelSupport> {
        KernelSupport::new(self.kernel_r1, self.kernel_r2, self.shape)
    }

    pub fn template<T: Real>(&self, coils: usize, seed: u64) -> Result<LorakiNetwork<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LorakiNetwork::init(
            4 * coils,
            self.hidden,
            self.support()?,
            self.iterations,
            T::lit(self.lambda_init),
            self.output_init,
            &mut rng,
        )
    }
}

/// Trains on pairs cut from `source` (scaled to unit RMS; the network is
/// positively homogeneous so the scale does not affect reconstruction) and
/// reconstructs `d_zp`.
pub fn loraki_reconstruct<T: Real>(
    d_zp: &KSpace<T>,
    mask: &SamplingMask,
    source: &KSpace<T>,
    patch: Option<(usize, usize)>,
    style: &MaskStyle,
    settings: &LorakiSettings,
    seed: u64,
) -> Result<(KSpace<T>, TrainingOutcome<T>)> {
    let rms = (source.energy() / T::from_count(source.data().len())).sqrt();
    if !(rms > T::zero()) {
        return Err(Error::InvalidParameter("training source is identically zero".into()));
    }
    let mut scaled = source.clone();
    scaled.scale(T::one() / rms);
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let (pair_seed, init_seed, train_seed): (u64, u64, u64) = (seeds.gen(), seeds.gen(), seeds.gen());
    let src = PairSource { kspace: &scaled, patch };
    let pairs = make_training_pairs(&src, style, settings.pairs, pair_seed)?;
    let template = settings.template(d_zp.channels(), init_seed)?;
    let outcome = train_loraki(&pairs, &template, &settings.training, train_seed)?;
    let rec = reconstruct_loraki(d_zp, mask, &outcome.network)?;
    Ok((rec, outcome))
}

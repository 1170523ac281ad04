//! Config-driven experiments: data generation, masking, reconstruction by
//! any subset of methods, metrics and on-disk artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grappa::{apply_grappa, default_kernel_shape, train_grappa, GrappaKernelSet};
use crate::grid::KSpace;
use crate::io::{
    read_kspace, save_loraki, save_raki, write_csv, write_grappa, write_kspace, write_mask, write_nullspace,
    write_toml, EspRow, MetricsRow, Pgm16, SweepRow, TimingRow,
};
use crate::kspace::rss_image;
use crate::loraki::{acs_training_source, loraki_reconstruct, synthesize_acs, LorakiNetwork, LorakiSettings};
use crate::loraks::{
    estimate_nullspace, prepare_ac_loraks, solve_ac_loraks, AcLoraksSettings, NullspaceBasis, NullspaceSelection,
};
use crate::metrics::{evaluate, nrmse, ReconReport};
use crate::phantom::{make_phantom, PhantomSpec};
use crate::raki::{raki_reconstruct, RakiHyper, RakiNet};
use crate::sampling::{
    apply_mask, effective_acceleration, enumerate_local_configs, extract_acs, partial_fourier_mask_side, uniform_mask,
    variable_density_mask_with_exponent, MaskStyle, PartialFourierSide, SamplingMask,
};
use crate::support::KernelSupport;

/// Smallest grid accepted from files and configs.
pub const MIN_GRID: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ZeroFill,
    Grappa,
    Raki,
    AcLoraks,
    Loraki,
    LorakiSynth,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::ZeroFill,
        Method::Grappa,
        Method::Raki,
        Method::AcLoraks,
        Method::Loraki,
        Method::LorakiSynth,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::ZeroFill => "zero-fill",
            Method::Grappa => "grappa",
            Method::Raki => "raki",
            Method::AcLoraks => "ac-loraks",
            Method::Loraki => "loraki",
            Method::LorakiSynth => "loraki-synth",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    Uniform,
    Random,
    PartialFourier,
}

fn default_fraction() -> f64 {
    0.75
}

fn default_exponent() -> f64 {
    crate::sampling::DEFAULT_DENSITY_EXPONENT
}

/// Acquisition pattern of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub style: MaskKind,
    /// Line spacing for uniform and partial Fourier masks (an integer),
    /// target acceleration for random masks.
    pub accel: f64,
    /// Central fully sampled lines (uniform and partial Fourier).
    #[serde(default)]
    pub acs_lines: Option<usize>,
    /// Central fully sampled block (random masks).
    #[serde(default)]
    pub acs_size: Option<(usize, usize)>,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
    #[serde(default)]
    pub side: PartialFourierSide,
    /// Random-mask seed; derived from the global seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl MaskSpec {
    fn integer_accel(&self) -> Result<usize> {
        if self.accel >= 1.0 && self.accel.fract() == 0.0 && self.accel <= 64.0 {
            Ok(self.accel as usize)
        } else {
            Err(Error::Config(format!("{:?} masks need an integer accel in 1..=64, got {}", self.style, self.accel)))
        }
    }

    fn acs_lines(&self) -> Result<usize> {
        self.acs_lines
            .ok_or_else(|| Error::Config(format!("{:?} masks need acs_lines", self.style)))
    }

    pub fn build(&self, n1: usize, n2: usize, seed: u64) -> Result<SamplingMask> {
        match self.style {
            MaskKind::Uniform => uniform_mask(n1, n2, self.integer_accel()?, self.acs_lines()?),
            MaskKind::PartialFourier => {
                partial_fourier_mask_side(n1, n2, self.fraction, self.integer_accel()?, self.acs_lines()?, self.side)
            }
            MaskKind::Random => {
                let acs = self
                    .acs_size
                    .ok_or_else(|| Error::Config("random masks need acs_size".into()))?;
                variable_density_mask_with_exponent(n1, n2, self.accel, acs, self.seed.unwrap_or(seed), self.exponent)
            }
        }
    }

    /// Family used to draw LORAKI training masks.
    pub fn training_style(&self) -> Result<MaskStyle> {
        Ok(match self.style {
            MaskKind::Uniform => MaskStyle::Uniform { accel: self.integer_accel()? },
            MaskKind::PartialFourier => MaskStyle::PartialFourier {
                fraction: self.fraction,
                accel: self.integer_accel()?,
            },
            MaskKind::Random => MaskStyle::Random {
                accel: self.accel,
                exponent: self.exponent,
            },
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrappaSettings {
    /// Kernel footprint; derived from the acceleration when absent.
    pub kernel: Option<(usize, usize)>,
}

fn default_error_gain() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    pub methods: Vec<Method>,
    /// Fully sampled `KSP1` data used instead of a phantom.
    #[serde(default)]
    pub input: Option<PathBuf>,
    /// Externally supplied full-grid reconstruction used verbatim as the
    /// `loraki-synth` training source instead of AC-LORAKS.
    #[serde(default)]
    pub synthetic_acs: Option<PathBuf>,
    /// Run methods on separate threads.
    #[serde(default)]
    pub parallel: bool,
    /// Error images show `|recon - gold|` at this many times the gray
    /// scale of the gold image.
    #[serde(default = "default_error_gain")]
    pub error_gain: f64,
    #[serde(default)]
    pub phantom: Option<PhantomSpec>,
    pub mask: MaskSpec,
    #[serde(default)]
    pub grappa: GrappaSettings,
    #[serde(default)]
    pub raki: RakiHyper,
    #[serde(default)]
    pub ac_loraks: AcLoraksSettings,
    #[serde(default)]
    pub loraki: LorakiSettings,
    /// Settings for `loraki-synth`; the `loraki` settings when absent.
    #[serde(default)]
    pub loraki_synth: Option<LorakiSettings>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method required".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("method {m} listed twice")));
            }
        }
        match (&self.phantom, &self.input) {
            (Some(_), Some(_)) => return Err(Error::Config("give either [phantom] or input, not both".into())),
            (None, None) => return Err(Error::Config("either [phantom] or input is required".into())),
            (Some(p), None) => p.validate().map_err(|e| Error::Config(e.to_string()))?,
            (None, Some(path)) => {
                if !path.is_file() {
                    return Err(Error::Config(format!("input {} does not exist", path.display())));
                }
            }
        }
        if let Some(path) = &self.synthetic_acs {
            if !path.is_file() {
                return Err(Error::Config(format!("synthetic_acs {} does not exist", path.display())));
            }
        }
        if !(self.error_gain > 0.0) || !self.error_gain.is_finite() {
            return Err(Error::Config("error_gain must be positive".into()));
        }
        match self.mask.style {
            MaskKind::Uniform | MaskKind::PartialFourier => {
                self.mask.integer_accel()?;
                self.mask.acs_lines()?;
            }
            MaskKind::Random => {
                if !(self.mask.accel >= 1.0) || self.mask.acs_size.is_none() {
                    return Err(Error::Config("random masks need accel >= 1 and acs_size".into()));
                }
            }
        }
        for (name, s) in [("loraki", &self.loraki), ("loraki_synth", self.synth_settings())] {
            if s.hidden == 0 || s.iterations == 0 || s.iterations > 100 || s.pairs == 0 || s.training.steps == 0 {
                return Err(Error::Config(format!(
                    "[{name}] needs hidden >= 1, iterations in 1..=100, pairs >= 1 and steps >= 1"
                )));
            }
        }
        if self.raki.steps == 0 || self.raki.c1 == 0 || self.raki.c2 == 0 {
            return Err(Error::Config("[raki] needs positive widths and steps".into()));
        }
        if self.ac_loraks.max_iterations == 0 {
            return Err(Error::Config("[ac_loraks] needs max_iterations >= 1".into()));
        }
        Ok(())
    }

    pub fn synth_settings(&self) -> &LorakiSettings {
        self.loraki_synth.as_ref().unwrap_or(&self.loraki)
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seed for one consumer, fixed by the global seed and a label, so adding
/// or removing methods never changes another method's seed. Kept below
/// 2^63 so manifests can store it as a TOML integer.
pub fn derive_seed(global: u64, label: &str) -> u64 {
    ChaCha8Rng::seed_from_u64(global ^ fnv1a(label.as_bytes())).gen::<u64>() >> 1
}

/// Gold data, mask and zero-filled input of an experiment.
#[derive(Clone, Debug)]
pub struct Problem {
    pub gold: KSpace<f64>,
    pub mask: SamplingMask,
    pub d_zp: KSpace<f64>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Problem> {
    let gold = match (&cfg.phantom, &cfg.input) {
        (Some(spec), _) => make_phantom::<f64>(spec)?.kspace,
        (None, Some(path)) => read_kspace::<f64>(path)?,
        (None, None) => return Err(Error::Config("no data source".into())),
    };
    let (n1, n2, _) = gold.dims();
    if n1 < MIN_GRID || n2 < MIN_GRID {
        return Err(Error::Config(format!("grid {n1}x{n2} is below {MIN_GRID}x{MIN_GRID}")));
    }
    let mask = cfg
        .mask
        .build(n1, n2, derive_seed(cfg.seed, "mask"))
        .map_err(|e| Error::Config(e.to_string()))?;
    let d_zp = apply_mask(&gold, &mask)?;
    Ok(Problem { gold, mask, d_zp })
}

/// Trained or calibrated state kept alongside a reconstruction.
#[derive(Clone, Debug)]
pub enum Artifact {
    None,
    Grappa(GrappaKernelSet<f64>),
    Nullspace(NullspaceBasis<f64>),
    Raki(RakiNet<f64>),
    Loraki(LorakiNetwork<f64>),
}

#[derive(Clone, Debug)]
pub struct MethodOutput {
    pub kspace: KSpace<f64>,
    pub artifact: Artifact,
    /// Final training loss for learned methods.
    pub final_loss: Option<f64>,
}

/// Runs one method on a prepared problem.
pub fn run_method(method: Method, problem: &Problem, cfg: &ExperimentConfig, seed: u64) -> Result<MethodOutput> {
    let (d_zp, mask) = (&problem.d_zp, &problem.mask);
    let plain = |kspace| MethodOutput { kspace, artifact: Artifact::None, final_loss: None };
    match method {
        Method::ZeroFill => Ok(plain(d_zp.clone())),
        Method::Grappa => {
            let shape = cfg
                .grappa
                .kernel
                .unwrap_or_else(|| default_kernel_shape(cfg.mask.accel.round().max(1.0) as usize));
            let support = KernelSupport::rectangular(shape.0, shape.1)?;
            let configs = enumerate_local_configs(mask, &support);
            let kernels = train_grappa(&extract_acs(d_zp, mask)?, &configs, shape)?;
            let kspace = apply_grappa(d_zp, &kernels, &configs)?;
            Ok(MethodOutput { kspace, artifact: Artifact::Grappa(kernels), final_loss: None })
        }
        Method::Raki => {
            let (kspace, training) = raki_reconstruct(d_zp, mask, &cfg.raki, seed)?;
            let final_loss = training.losses.iter().filter_map(|l| l.last()).copied().reduce(f64::max);
            Ok(MethodOutput { kspace, artifact: Artifact::Raki(training.net), final_loss })
        }
        Method::AcLoraks => {
            let problem = prepare_ac_loraks(d_zp, mask, &cfg.ac_loraks)?;
            let n = estimate_nullspace(&problem.calibration, cfg.ac_loraks.nullspace)?;
            let kspace = solve_ac_loraks(&problem, &n, &cfg.ac_loraks)?.solution;
            Ok(MethodOutput { kspace, artifact: Artifact::Nullspace(n), final_loss: None })
        }
        Method::Loraki | Method::LorakiSynth => {
            let (settings, source, patch) = if method == Method::Loraki {
                (&cfg.loraki, acs_training_source(d_zp, mask)?, None)
            } else {
                let s = cfg.synth_settings();
                let source = match &cfg.synthetic_acs {
                    Some(path) => {
                        let k = read_kspace::<f64>(path)?;
                        if k.dims() != d_zp.dims() {
                            return Err(Error::Dimension(format!(
                                "synthetic ACS {:?} does not match the data {:?}",
                                k.dims(),
                                d_zp.dims()
                            )));
                        }
                        k
                    }
                    None => synthesize_acs(d_zp, mask, &cfg.ac_loraks)?,
                };
                let (n1, n2, _) = source.dims();
                let patch = s.synthetic_patch.map(|(p1, p2)| (p1.min(n1), p2.min(n2)));
                (s, source, patch)
            };
            let style = cfg.mask.training_style()?;
            let (kspace, outcome) = loraki_reconstruct(d_zp, mask, &source, patch, &style, settings, seed)?;
            let final_loss = outcome.losses.last().copied();
            Ok(MethodOutput { kspace, artifact: Artifact::Loraki(outcome.network), final_loss })
        }
    }
}

/// Best AC-LORAKS configuration found by [`tune_ac_loraks`].
#[derive(Clone, Debug)]
pub struct AcLoraksTuning {
    pub settings: AcLoraksSettings,
    pub nrmse: f64,
    pub kspace: KSpace<f64>,
    /// `(kernel, threshold, nrmse)` for every combination; `None` where the
    /// solve failed.
    pub tried: Vec<(usize, f64, Option<f64>)>,
}

/// Grid search over square kernel sizes and nullspace thresholds, scored
/// by NRMSE against the problem's reference. This is oracle tuning: it
/// gives AC-LORAKS its best case for a benchmark, not a calibration rule.
pub fn tune_ac_loraks(
    problem: &Problem,
    base: &AcLoraksSettings,
    kernels: &[usize],
    thresholds: &[f64],
) -> Result<AcLoraksTuning> {
    let gold = rss_image(&problem.gold)?;
    let mut best: Option<AcLoraksTuning> = None;
    let mut tried = Vec::with_capacity(kernels.len() * thresholds.len());
    let mut last_err = Error::InvalidParameter("empty AC-LORAKS search grid".into());
    for &r in kernels {
        let mut settings = base.clone();
        settings.kernel_r1 = r;
        settings.kernel_r2 = r;
        let prepared = match prepare_ac_loraks(&problem.d_zp, &problem.mask, &settings) {
            Ok(p) => p,
            Err(e) => {
                tried.extend(thresholds.iter().map(|&t| (r, t, None)));
                last_err = e;
                continue;
            }
        };
        for &t in thresholds {
            settings.nullspace = NullspaceSelection::Threshold(t);
            let attempt = estimate_nullspace(&prepared.calibration, settings.nullspace)
                .and_then(|n| solve_ac_loraks(&prepared, &n, &settings))
                .and_then(|o| Ok((nrmse(&rss_image(&o.solution)?, &gold)?, o.solution)));
            match attempt {
                Ok((score, kspace)) => {
                    tried.push((r, t, Some(score)));
                    if best.as_ref().map_or(true, |b| score < b.nrmse) {
                        best = Some(AcLoraksTuning { settings: settings.clone(), nrmse: score, kspace, tried: Vec::new() });
                    }
                }
                Err(e) => {
                    tried.push((r, t, None));
                    last_err = e;
                }
            }
        }
    }
    let mut best = best.ok_or(last_err)?;
    best.tried = tried;
    Ok(best)
}

/// Per-method entry of the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: Method,
    pub seed: u64,
    pub ok: bool,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub nrmse: Option<f64>,
    #[serde(default)]
    pub ssim: Option<f64>,
    #[serde(default)]
    pub final_loss: Option<f64>,
    #[serde(default)]
    pub runtime_seconds: Option<f64>,
    #[serde(default)]
    pub files: Vec<String>,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mask_seed: u64,
    pub effective_acceleration: f64,
    /// Gold RSS maximum; magnitude PGMs map `[0, image_scale]` to `[0, 65535]`.
    pub image_scale: f64,
    /// Error PGMs map `[0, error_scale]` to `[0, 65535]`.
    pub error_scale: f64,
    pub methods: Vec<MethodRecord>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Successful methods, sorted by NRMSE.
    pub reports: Vec<ReconReport>,
    pub manifest: Manifest,
}

impl RunOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &MethodRecord> {
        self.manifest.methods.iter().filter(|m| !m.ok)
    }

    pub fn report(&self, method: Method) -> Option<&ReconReport> {
        self.reports.iter().find(|r| r.method == method.label())
    }
}

fn timed(method: Method, problem: &Problem, cfg: &ExperimentConfig, seed: u64) -> (Result<MethodOutput>, f64) {
    let t = Instant::now();
    let out = run_method(method, problem, cfg, seed);
    (out, t.elapsed().as_secs_f64())
}

fn method_settings(method: Method, cfg: &ExperimentConfig) -> String {
    let text = match method {
        Method::ZeroFill => Ok(String::new()),
        Method::Grappa => toml::to_string(&cfg.grappa),
        Method::Raki => toml::to_string(&cfg.raki),
        Method::AcLoraks => toml::to_string(&cfg.ac_loraks),
        Method::Loraki => toml::to_string(&cfg.loraki),
        Method::LorakiSynth => toml::to_string(cfg.synth_settings()),
    };
    text.unwrap_or_default()
}

fn write_artifact(artifact: &Artifact, seed: u64, cfg: &ExperimentConfig, stem: &Path) -> Result<Option<PathBuf>> {
    Ok(match artifact {
        Artifact::None => None,
        Artifact::Grappa(k) => {
            let p = stem.with_extension("grp");
            write_grappa(k, &p)?;
            Some(p)
        }
        Artifact::Nullspace(n) => {
            let p = stem.with_extension("nsb");
            write_nullspace(n, &p)?;
            Some(p)
        }
        Artifact::Raki(net) => {
            let p = stem.with_extension("nnw");
            save_raki(net, seed, &p)?;
            Some(p)
        }
        Artifact::Loraki(net) => {
            let p = stem.with_extension("nnw");
            save_loraki(net, seed, Some(cfg.mask.training_style()?), &p)?;
            Some(p)
        }
    })
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Runs every configured method and writes the run directory. Method
/// failures are recorded in the manifest and do not stop the run; errors
/// in the configuration or the output directory are returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let problem = prepare(cfg)?;
    let out = &cfg.output;
    fs::create_dir_all(out)?;
    let gold_img = rss_image(&problem.gold)?;
    let image_scale = gold_img.max_value();
    if !(image_scale > 0.0) {
        return Err(Error::Config("gold data is identically zero".into()));
    }
    let error_scale = image_scale / cfg.error_gain;
    write_kspace(&problem.gold, out.join("gold.ksp"))?;
    write_mask(&problem.mask, out.join("mask.msk"))?;
    Pgm16::from_image(&gold_img, image_scale)?.write(out.join("gold.pgm"))?;

    let seeds: Vec<u64> = cfg.methods.iter().map(|m| derive_seed(cfg.seed, m.label())).collect();
    let results: Vec<(Result<MethodOutput>, f64)> = if cfg.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg
                .methods
                .iter()
                .zip(&seeds)
                .map(|(&m, &seed)| {
                    let problem = &problem;
                    s.spawn(move || timed(m, problem, cfg, seed))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| (Err(Error::InvalidParameter("method thread panicked".into())), 0.0))
                })
                .collect()
        })
    } else {
        cfg.methods.iter().zip(&seeds).map(|(&m, &seed)| timed(m, &problem, cfg, seed)).collect()
    };

    let mut reports = Vec::new();
    let mut records = Vec::new();
    for ((&method, &seed), (result, runtime)) in cfg.methods.iter().zip(&seeds).zip(results) {
        let mut record = MethodRecord {
            method,
            seed,
            ok: false,
            error: None,
            nrmse: None,
            ssim: None,
            final_loss: None,
            runtime_seconds: Some(runtime),
            files: Vec::new(),
        };
        let written = result.and_then(|output| {
            let label = method.label();
            let report = evaluate(label, &output.kspace, &problem.gold, runtime, method_settings(method, cfg))?;
            let mut files = vec![format!("{label}.ksp"), format!("{label}.pgm"), format!("{label}_error.pgm")];
            write_kspace(&output.kspace, out.join(&files[0]))?;
            let img = rss_image(&output.kspace)?;
            Pgm16::from_image(&img, image_scale)?.write(out.join(&files[1]))?;
            Pgm16::from_image(&img.abs_diff(&gold_img)?, error_scale)?.write(out.join(&files[2]))?;
            let esp: Vec<EspRow> = report
                .esp
                .iter()
                .map(|b| EspRow { bin_center: b.center, ratio: b.ratio })
                .collect();
            let esp_name = format!("esp_{label}.csv");
            write_csv(&esp, out.join(&esp_name))?;
            files.push(esp_name);
            if let Some(p) = write_artifact(&output.artifact, seed, cfg, &out.join(label))? {
                files.push(file_name(&p));
            }
            Ok((report, files, output.final_loss))
        });
        match written {
            Ok((report, files, final_loss)) => {
                record.ok = true;
                record.nrmse = Some(report.nrmse);
                record.ssim = Some(report.ssim);
                record.final_loss = final_loss;
                record.files = files;
                reports.push(report);
            }
            Err(e) => record.error = Some(e.to_string()),
        }
        records.push(record);
    }
    reports.sort_by(|a, b| a.nrmse.total_cmp(&b.nrmse));
    let rows: Vec<MetricsRow> = reports
        .iter()
        .map(|r| MetricsRow { method: r.method.clone(), nrmse: r.nrmse, ssim: r.ssim })
        .collect();
    write_csv(&rows, out.join("metrics.csv"))?;
    let timings: Vec<TimingRow> = records
        .iter()
        .map(|r| TimingRow { method: r.method.label().into(), runtime_seconds: r.runtime_seconds.unwrap_or(0.0) })
        .collect();
    write_csv(&timings, out.join("timings.csv"))?;
    let manifest = Manifest {
        mask_seed: cfg.mask.seed.unwrap_or_else(|| derive_seed(cfg.seed, "mask")),
        effective_acceleration: effective_acceleration(&problem.mask),
        image_scale,
        error_scale,
        methods: records,
        config: cfg.clone(),
    };
    write_toml(&manifest, out.join("manifest.toml"))?;
    Ok(RunOutcome { reports, manifest })
}

/// Parameter varied by [`sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// LORAKI hidden channels.
    Hidden,
    /// LORAKI iterations.
    Iterations,
    /// LORAKI kernel size (square).
    KernelSize,
    AcsLines,
    /// Side of a square ACS block (random masks).
    AcsSize,
    Accel,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::Hidden => "C",
            SweepAxis::Iterations => "K",
            SweepAxis::KernelSize => "R",
            SweepAxis::AcsLines => "acs_lines",
            SweepAxis::AcsSize => "acs_size",
            SweepAxis::Accel => "accel",
        }
    }

    /// Returns a copy of `cfg` with the axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let bad = || Error::Config(format!("invalid value {value:?} for sweep axis {}", self.label()));
        let mut c = cfg.clone();
        let mut loraki = |f: &dyn Fn(&mut LorakiSettings)| {
            f(&mut c.loraki);
            if let Some(s) = c.loraki_synth.as_mut() {
                f(s);
            }
        };
        match self {
            SweepAxis::Hidden => {
                let v: usize = value.parse().map_err(|_| bad())?;
                loraki(&|s| s.hidden = v);
            }
            SweepAxis::Iterations => {
                let v: usize = value.parse().map_err(|_| bad())?;
                loraki(&|s| s.iterations = v);
            }
            SweepAxis::KernelSize => {
                let v: usize = value.parse().map_err(|_| bad())?;
                if v % 2 == 0 {
                    return Err(bad());
                }
                loraki(&|s| {
                    s.kernel_r1 = v;
                    s.kernel_r2 = v;
                });
            }
            SweepAxis::AcsLines => c.mask.acs_lines = Some(value.parse().map_err(|_| bad())?),
            SweepAxis::AcsSize => {
                let v: usize = value.parse().map_err(|_| bad())?;
                c.mask.acs_size = Some((v, v));
            }
            SweepAxis::Accel => c.mask.accel = value.parse().map_err(|_| bad())?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "C" => SweepAxis::Hidden,
            "K" => SweepAxis::Iterations,
            "R" => SweepAxis::KernelSize,
            "acs_lines" => SweepAxis::AcsLines,
            "acs_size" => SweepAxis::AcsSize,
            "accel" => SweepAxis::Accel,
            _ => {
                return Err(Error::Config(format!(
                    "unknown sweep axis {s:?}; expected C, K, R, acs_lines, acs_size or accel"
                )))
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunOutcome>,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.runs.iter().map(|r| r.failures().count()).sum()
    }
}

/// One run per value (sub-directories of the configured output, shared
/// global seed) and an aggregated `sweep_<axis>.csv`.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut c = axis.apply(cfg, v)?;
            c.output = cfg.output.join(format!("{}_{v}", axis.label()));
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (value, c) in values.iter().zip(&configs) {
        let run = run_experiment(c)?;
        for m in &c.methods {
            if let Some(r) = run.report(*m) {
                rows.push(SweepRow { value: value.clone(), method: r.method.clone(), nrmse: r.nrmse, ssim: r.ssim });
            }
        }
        runs.push(run);
    }
    write_csv(&rows, cfg.output.join(format!("sweep_{}.csv", axis.label())))?;
    Ok(SweepOutcome { rows, runs })
}

/// Plain-text summary of one or more run directories.
pub fn report(dirs: &[PathBuf]) -> Result<String> {
    use std::fmt::Write;
    let mut text = String::new();
    for dir in dirs {
        let manifest: Manifest = crate::io::read_toml(dir.join("manifest.toml"))?;
        let _ = writeln!(text, "{} (effective acceleration {:.2})", dir.display(), manifest.effective_acceleration);
        let mut ok: Vec<&MethodRecord> = manifest.methods.iter().filter(|m| m.ok).collect();
        ok.sort_by(|a, b| a.nrmse.unwrap_or(f64::INFINITY).total_cmp(&b.nrmse.unwrap_or(f64::INFINITY)));
        let _ = writeln!(text, "  {:<14} {:>10} {:>8} {:>10}", "method", "nrmse", "ssim", "seconds");
        for m in ok {
            let _ = writeln!(
                text,
                "  {:<14} {:>10.5} {:>8.4} {:>10.2}",
                m.method.label(),
                m.nrmse.unwrap_or(f64::NAN),
                m.ssim.unwrap_or(f64::NAN),
                m.runtime_seconds.unwrap_or(f64::NAN)
            );
        }
        for m in manifest.methods.iter().filter(|m| !m.ok) {
            let _ = writeln!(text, "  {:<14} failed: {}", m.method.label(), m.error.as_deref().unwrap_or("unknown"));
        }
    }
    Ok(text)
}

/// Seed of every method for a global seed (the manifest records these).
pub fn method_seeds(global: u64) -> BTreeMap<Method, u64> {
    Method::ALL.into_iter().map(|m| (m, derive_seed(global, m.label()))).collect()
}

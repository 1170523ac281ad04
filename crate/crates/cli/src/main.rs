//! `loraki` command-line tool: phantom and mask generation, config-driven
//! reconstruction runs, metrics, parameter sweeps and run reports.
//!
//! Exit codes: 0 success, 1 a reconstruction method failed, 2 invalid
//! configuration or input.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use loraki::experiment::{report, run_experiment, sweep, ExperimentConfig, MaskKind, MaskSpec, SweepAxis};
use loraki::io::{read_kspace, write_csv, write_kspace, write_mask, EspRow, Pgm16};
use loraki::kspace::rss_image;
use loraki::metrics::{error_spectrum, normalize_pair, nrmse, ssim};
use loraki::phantom::{make_phantom, PhantomSpec};
use loraki::sampling::{effective_acceleration, PartialFourierSide};
use loraki::{Error, MagnitudeImage64};

#[derive(Parser)]
#[command(name = "loraki", version, about = "Autocalibrated k-space reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    Uniform,
    Random,
    PartialFourier,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-coil phantom as KSP1 (and optionally its RSS image).
    Phantom {
        #[arg(long, default_value_t = 64)]
        n1: usize,
        #[arg(long, default_value_t = 187)]
        n2: usize,
        #[arg(long, default_value_t = 4)]
        coils: usize,
        #[arg(long, default_value_t = 2)]
        phase_order: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        /// 16-bit PGM of the coil-combined magnitude.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Write a sampling mask as MSK1.
    Mask {
        #[arg(long)]
        n1: usize,
        #[arg(long)]
        n2: usize,
        #[arg(long, value_enum, default_value = "uniform")]
        style: Style,
        #[arg(long)]
        accel: f64,
        #[arg(long)]
        acs_lines: Option<usize>,
        /// ACS block for random masks, e.g. `24x24`.
        #[arg(long, value_parser = parse_pair)]
        acs_size: Option<(usize, usize)>,
        #[arg(long, default_value_t = 0.75)]
        fraction: f64,
        #[arg(long, default_value_t = loraki::sampling::DEFAULT_DENSITY_EXPONENT)]
        exponent: f64,
        /// Keep the late half of k-space for partial Fourier masks.
        #[arg(long)]
        late: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Run an experiment described by a TOML config.
    Recon { config: PathBuf },
    /// NRMSE, SSIM and error spectrum of a reconstruction against a reference.
    Metrics {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Write the error spectrum as CSV.
        #[arg(long)]
        esp: Option<PathBuf>,
        #[arg(long, default_value_t = loraki::metrics::DEFAULT_ESP_BINS)]
        bins: usize,
    },
    /// Repeat an experiment over values of one parameter.
    Sweep {
        config: PathBuf,
        /// One of C, K, R, acs_lines, acs_size, accel.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Summarize finished run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('x').ok_or_else(|| format!("expected AxB, got {s:?}"))?;
    Ok((a.parse().map_err(|e| format!("{e}"))?, b.parse().map_err(|e| format!("{e}"))?))
}

enum Outcome {
    Ok,
    MethodFailed,
}

fn execute(command: Command) -> Result<Outcome, Error> {
    match command {
        Command::Phantom { n1, n2, coils, phase_order, noise, seed, out, pgm } => {
            let spec = PhantomSpec { n1, n2, coils, phase_order, noise_sigma: noise, seed };
            let p = make_phantom::<f64>(&spec)?;
            write_kspace(&p.kspace, &out)?;
            if let Some(path) = pgm {
                Pgm16::from_image(&p.image, p.image.max_value())?.write(path)?;
            }
            println!("wrote {n1}x{n2}x{coils} phantom to {}", out.display());
        }
        Command::Mask { n1, n2, style, accel, acs_lines, acs_size, fraction, exponent, late, seed, out, pgm } => {
            let spec = MaskSpec {
                style: match style {
                    Style::Uniform => MaskKind::Uniform,
                    Style::Random => MaskKind::Random,
                    Style::PartialFourier => MaskKind::PartialFourier,
                },
                accel,
                acs_lines,
                acs_size,
                fraction,
                exponent,
                side: if late { PartialFourierSide::Late } else { PartialFourierSide::Early },
                seed: Some(seed),
            };
            let mask = spec.build(n1, n2, seed)?;
            write_mask(&mask, &out)?;
            if let Some(path) = pgm {
                let img = MagnitudeImage64::from_vec(n1, n2, mask.sampled().iter().map(|&s| s as u8 as f64).collect())?;
                Pgm16::from_image(&img, 1.0)?.write(path)?;
            }
            println!("effective acceleration {:.3}", effective_acceleration(&mask));
        }
        Command::Recon { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let run = run_experiment(&cfg)?;
            print!("{}", report(&[cfg.output.clone()])?);
            if run.failures().count() > 0 {
                return Ok(Outcome::MethodFailed);
            }
        }
        Command::Metrics { recon, gold, esp, bins } => {
            let (r, g) = (read_kspace::<f64>(&recon)?, read_kspace::<f64>(&gold)?);
            let (ri, gi) = (rss_image(&r)?, rss_image(&g)?);
            let (rn, gn) = normalize_pair(&ri, &gi)?;
            println!("nrmse {:.6}", nrmse(&ri, &gi)?);
            println!("ssim {:.6}", ssim(&rn, &gn)?);
            if let Some(path) = esp {
                let rows: Vec<EspRow> = error_spectrum(&r, &g, bins)?
                    .into_iter()
                    .map(|b| EspRow { bin_center: b.center, ratio: b.ratio })
                    .collect();
                write_csv(&rows, path)?;
            }
        }
        Command::Sweep { config, axis, values } => {
            let cfg = ExperimentConfig::load(&config)?;
            let axis: SweepAxis = axis.parse()?;
            let out = sweep(&cfg, axis, &values)?;
            for row in &out.rows {
                println!("{}={:<6} {:<14} nrmse {:.5} ssim {:.4}", axis.label(), row.value, row.method, row.nrmse, row.ssim);
            }
            if out.failures() > 0 {
                return Ok(Outcome::MethodFailed);
            }
        }
        Command::Report { dirs } => print!("{}", report(&dirs)?),
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::MethodFailed) => {
            eprintln!("one or more methods failed; see the manifest");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } | Error::TrainingDiverged { .. } | Error::NonFinite(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

//! The `hsid` command line harness.
//!
//! Exit codes: 0 success, 1 internal failure (including a failed gradient
//! gate or a diverged run), 2 bad input or configuration.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::save_checkpoint;
use crate::config::HarnessConfig;
use crate::cube::{import_raw_bsq, load_cube, save_cube, RawSample};
use crate::error::{HsidError, Result};
use crate::experiment;
use crate::gradcheck::{network_gradcheck, GradcheckOptions, GradcheckReport};
use crate::inference::{emit_band_image, emit_pseudocolor, run_job, DenoiseJob, Tiling};
use crate::metrics::{emit_csv, report, QualityReport};
use crate::model::ArchitectureSpec;
use crate::noise::add_noise;
use crate::synth::{synthesize, SceneSpec};

/// Gate threshold on the worst analytic-vs-numeric relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "hsid", version, about = "Spatial-spectral residual CNN for hyperspectral denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<HarnessConfig> {
        let mut cfg = match &self.config {
            Some(p) => HarnessConfig::load(p)?,
            None => HarnessConfig::default(),
        };
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(HsidError::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}")));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Add simulated noise to a clean cube; writes the noisy cube, the
    /// normalised clean cube and the per-band sigma CSV.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Clean cube (overrides data.clean).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Build the augmented patch set, train, and write the checkpoint and loss trace.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Denoise a cube band by band with a trained checkpoint.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Process each band in square tiles of this size.
        #[arg(long)]
        tile: Option<usize>,
        /// Tile overlap; defaults to the receptive-field radius.
        #[arg(long)]
        overlap: Option<usize>,
        /// Write a pseudo-color PPM of three 0-based bands, e.g. 57,27,17.
        #[arg(long, value_delimiter = ',')]
        emit_bands: Option<Vec<usize>>,
        /// Write one 0-based band as a 16-bit PGM.
        #[arg(long)]
        emit_band: Option<usize>,
    },
    /// Per-band PSNR/SSIM and mean spectral angle of a test cube against a reference.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference check of the full network's backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        /// Components probed per parameter tensor.
        #[arg(long, default_value_t = GradcheckOptions::default().samples_per_tensor)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_multi_scale: bool,
        #[arg(long)]
        no_multi_level: bool,
        /// Test hook: perturb one analytic gradient so the gate must fail.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Train and evaluate once per adjacent-band count; writes a (K, MPSNR) CSV.
    Ksweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides ksweep.k_list.
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
    },
    /// Generate a synthetic normalised cube.
    Synthesize {
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        bands: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Convert a headerless band-sequential raw file into an HSIC cube.
    ImportRaw {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        bands: usize,
        /// u8, u16le, i16le, f32le or f64le.
        #[arg(long)]
        sample: RawSample,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                2
            } else {
                1
            }
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| HsidError::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| HsidError::io(path, e))
}

fn summary_line(label: &str, r: &QualityReport) -> String {
    let msa = r.msa.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
    format!("{label}: MPSNR {:.3} dB, MSSIM {:.4}, MSA {msa}", r.mpsnr, r.mssim)
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Simulate { config, input } => {
            let mut cfg = config.load()?;
            if let Some(p) = input {
                cfg.clean = Some(p);
            }
            cmd_simulate(&cfg)
        }
        Command::Train { config } => cmd_train(&config.load()?),
        Command::Denoise { checkpoint, input, output, tile, overlap, emit_bands, emit_band } => {
            let tiling = match tile {
                None => None,
                Some(tile) => {
                    let overlap = match overlap {
                        Some(o) => o,
                        None => crate::checkpoint::load_checkpoint(&checkpoint, None)?.spec.receptive_radius(),
                    };
                    Some(Tiling { tile, overlap })
                }
            };
            if emit_bands.as_ref().is_some_and(|b| b.len() != 3) {
                return Err(HsidError::InvalidArgument("--emit-bands takes exactly three bands".into()));
            }
            ensure_parent(&output)?;
            let out = run_job(&DenoiseJob { input, checkpoint, output: output.clone(), tiling })?;
            if let Some(b) = emit_bands {
                let path = output.with_extension("ppm");
                emit_pseudocolor(&out, [b[0], b[1], b[2]], &path)?;
                println!("wrote {}", path.display());
            }
            if let Some(b) = emit_band {
                let path = output.with_extension(format!("band{b}.pgm"));
                emit_band_image(&out, b, &path)?;
                println!("wrote {}", path.display());
            }
            println!("wrote {}", output.display());
            Ok(0)
        }
        Command::Evaluate { reference, test, output } => {
            let r = report(&load_cube(&reference)?, &load_cube(&test)?)?;
            ensure_parent(&output)?;
            emit_csv(&r, &output)?;
            println!("{}", summary_line("test", &r));
            Ok(0)
        }
        Command::Gradcheck { k, patch, samples, seed, no_multi_scale, no_multi_level, corrupt_backward } => {
            let spec = ArchitectureSpec::default()
                .with_adjacent_bands(k)
                .with_multi_scale(!no_multi_scale)
                .with_multi_level(!no_multi_level);
            let opts = GradcheckOptions { spec, patch, samples_per_tensor: samples, seed, corrupt_backward, ..Default::default() };
            cmd_gradcheck(&opts)
        }
        Command::Ksweep { config, k_list } => {
            let mut cfg = config.load()?;
            if let Some(k) = k_list {
                cfg.k_list = k;
            }
            cmd_ksweep(&cfg)
        }
        Command::Synthesize { width, height, bands, seed, output } => {
            let cube = synthesize(&SceneSpec::new(width, height, bands, seed))?;
            ensure_parent(&output)?;
            save_cube(&cube, &output)?;
            println!("wrote {}", output.display());
            Ok(0)
        }
        Command::ImportRaw { input, width, height, bands, sample, output } => {
            let cube = import_raw_bsq(&input, width, height, bands, sample)?;
            ensure_parent(&output)?;
            save_cube(&cube, &output)?;
            println!("wrote {}", output.display());
            Ok(0)
        }
    }
}

fn cmd_simulate(cfg: &HarnessConfig) -> Result<i32> {
    let clean = experiment::load_clean(cfg)?;
    let spec = cfg.noise_spec();
    let noisy = add_noise(&clean, &spec)?;
    let sigmas = spec.sigma_profile(clean.bands())?;
    let mut csv = String::from("band,sigma\n");
    for (b, s) in sigmas.iter().enumerate() {
        let _ = writeln!(csv, "{b},{s}");
    }
    let (noisy_path, clean_path, sigma_path) =
        (cfg.output_path(&cfg.noisy_out), cfg.output_path(&cfg.clean_out), cfg.output_path(&cfg.sigma_csv));
    ensure_parent(&noisy_path)?;
    save_cube(&noisy, &noisy_path)?;
    ensure_parent(&clean_path)?;
    save_cube(&clean, &clean_path)?;
    write_text(&sigma_path, &csv)?;
    println!("wrote {}, {}, {}", noisy_path.display(), clean_path.display(), sigma_path.display());
    Ok(0)
}

fn cmd_train(cfg: &HarnessConfig) -> Result<i32> {
    let clean = experiment::load_clean(cfg)?;
    let spec = cfg.architecture();
    spec.validate()?;
    let tc = cfg.train_config();
    if let Some(p) = &tc.loss_trace_path {
        ensure_parent(p)?;
    }
    if let Some(dir) = &tc.snapshot_dir {
        std::fs::create_dir_all(dir).map_err(|e| HsidError::io(dir, e))?;
    }
    let out = experiment::run(&clean, cfg, &spec)?;
    let ckpt = cfg.output_path(&cfg.checkpoint);
    ensure_parent(&ckpt)?;
    save_checkpoint(&ckpt, &spec, &out.training.params, Some(&out.training.state))?;
    info!("{} samples, {} iterations", out.samples, out.training.trace.records.len());
    if let Some(last) = out.training.trace.records.last() {
        println!("final loss {:.6e} after {} iterations", last.loss, last.iteration);
    }
    if let Some(eval) = &out.evaluation {
        let path = cfg.output_path(&cfg.eval_csv);
        ensure_parent(&path)?;
        emit_csv(&eval.denoised, &path)?;
        println!("{}", summary_line("noisy", &eval.noisy));
        println!("{}", summary_line("denoised", &eval.denoised));
    }
    println!("wrote {}", ckpt.display());
    Ok(0)
}

/// Runs the gradient gate, prints the per-tensor table and verdict, and returns the report.
pub fn gradcheck_gate(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let rep = network_gradcheck(opts)?;
    println!("{:<28} {:>12} {:>8} {:>8}", "tensor", "worst_rel", "checked", "skipped");
    for t in &rep.tensors {
        println!("{:<28} {:>12.3e} {:>8} {:>8}", t.name, t.worst, t.checked, t.skipped);
    }
    let pass = rep.passes(GRADCHECK_TOLERANCE);
    println!(
        "max relative error {:.3e} over {} components ({} skipped at ReLU kinks): {}",
        rep.max_error(),
        rep.checked(),
        rep.skipped(),
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(rep)
}

fn cmd_gradcheck(opts: &GradcheckOptions) -> Result<i32> {
    let rep = gradcheck_gate(opts)?;
    Ok(if rep.passes(GRADCHECK_TOLERANCE) { 0 } else { 1 })
}

fn cmd_ksweep(cfg: &HarnessConfig) -> Result<i32> {
    if cfg.test_region.is_none() {
        return Err(HsidError::MissingSetting("data.test_region".into()));
    }
    let clean = experiment::load_clean(cfg)?;
    let mut csv = String::from("k,mpsnr,mssim,msa,noisy_mpsnr\n");
    for &k in &cfg.k_list {
        let mut run_cfg = cfg.clone();
        run_cfg.adjacent_bands = k;
        let spec = run_cfg.architecture();
        spec.validate()?;
        let out = experiment::run(&clean, &run_cfg, &spec)?;
        let eval = out.evaluation.expect("test region is set");
        let msa = eval.denoised.msa.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let _ = writeln!(csv, "{k},{},{},{msa},{}", eval.denoised.mpsnr, eval.denoised.mssim, eval.noisy.mpsnr);
        println!("K={k}: {} (noisy {:.3} dB)", summary_line("denoised", &eval.denoised), eval.noisy.mpsnr);
    }
    let path = cfg.output_path(&cfg.ksweep_csv);
    write_text(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(0)
}

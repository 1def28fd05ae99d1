//! `key = value` harness configuration.
//!
//! Lines are UTF-8, `#` starts a comment, blank lines are ignored and unknown
//! keys are rejected. Relative output paths are resolved against `output.dir`,
//! which the `HSID_OUT_DIR` environment variable overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cube::Rect;
use crate::error::{HsidError, Result};
use crate::model::ArchitectureSpec;
use crate::noise::NoiseSpec;
use crate::pipeline::{AugmentSpec, Rotation};
use crate::trainer::{OptimizerConfig, StepDecay, TrainConfig};

pub const OUT_DIR_ENV: &str = "HSID_OUT_DIR";

pub const DEFAULT_NOISE_SEED: u64 = 1;
pub const DEFAULT_INIT_SEED: u64 = 2;
pub const DEFAULT_SHUFFLE_SEED: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    Band,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseCase {
    Fixed,
    Uniform,
    GaussianCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub clean: Option<PathBuf>,
    pub test_region: Option<Rect>,
    pub normalize: Normalization,

    pub noise_case: NoiseCase,
    pub sigma: f64,
    pub sigma_max: f64,
    pub beta: f64,
    pub eta: f64,

    pub noise_seed: u64,
    pub init_seed: u64,
    pub shuffle_seed: u64,

    pub adjacent_bands: usize,
    pub multi_scale: bool,
    pub multi_level: bool,
    pub branch_relu: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub max_iterations: Option<u64>,
    pub snapshot_every: Option<u64>,
    pub patch_size: usize,
    pub stride: usize,
    pub rotations: Vec<Rotation>,
    pub scales: Vec<f64>,

    pub optimizer: OptimizerConfig,

    pub out_dir: PathBuf,
    pub noisy_out: PathBuf,
    pub clean_out: PathBuf,
    pub sigma_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_trace: PathBuf,
    pub snapshot_dir: PathBuf,
    pub eval_csv: PathBuf,
    pub ksweep_csv: PathBuf,
    pub k_list: Vec<usize>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        let augment = AugmentSpec::default();
        HarnessConfig {
            clean: None,
            test_region: None,
            normalize: Normalization::Band,
            noise_case: NoiseCase::Fixed,
            sigma: 25.0,
            sigma_max: 25.0,
            beta: 200.0,
            eta: 30.0,
            noise_seed: DEFAULT_NOISE_SEED,
            init_seed: DEFAULT_INIT_SEED,
            shuffle_seed: DEFAULT_SHUFFLE_SEED,
            adjacent_bands: 24,
            multi_scale: true,
            multi_level: true,
            branch_relu: true,
            epochs: 100,
            batch_size: 128,
            max_iterations: None,
            snapshot_every: None,
            patch_size: 20,
            stride: 20,
            rotations: augment.rotations,
            scales: augment.scales,
            optimizer: OptimizerConfig::default(),
            out_dir: PathBuf::from("."),
            noisy_out: PathBuf::from("noisy.hsic"),
            clean_out: PathBuf::from("clean.hsic"),
            sigma_csv: PathBuf::from("sigma.csv"),
            checkpoint: PathBuf::from("model.hsck"),
            loss_trace: PathBuf::from("loss.csv"),
            snapshot_dir: PathBuf::from("snapshots"),
            eval_csv: PathBuf::from("eval.csv"),
            ksweep_csv: PathBuf::from("ksweep.csv"),
            k_list: vec![4, 12, 24],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HsidError::InvalidArgument(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(HsidError::InvalidArgument(format!("{key}: expected on/off, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_optional(key: &str, value: &str) -> Result<Option<u64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl HarnessConfig {
    /// Parses a whole config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = HarnessConfig::default();
        cfg.merge(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HsidError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn merge(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HsidError::Config { line: i + 1, message: format!("expected `key = value`, got {line:?}") });
            };
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                HsidError::InvalidArgument(message) => HsidError::Config { line: i + 1, message },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies a single `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.clean" => self.clean = Some(PathBuf::from(value)),
            "data.test_region" => {
                self.test_region = if value == "none" {
                    None
                } else {
                    let v: Vec<usize> = parse_list(key, value)?;
                    let [x, y, w, h] = v[..] else {
                        return Err(HsidError::InvalidArgument(format!("{key}: expected x,y,width,height")));
                    };
                    Some(Rect::new(x, y, w, h))
                }
            }
            "data.normalize" => {
                self.normalize = match value {
                    "none" => Normalization::None,
                    "band" => Normalization::Band,
                    "global" => Normalization::Global,
                    _ => return Err(HsidError::InvalidArgument(format!("{key}: expected none/band/global"))),
                }
            }
            "noise.case" => {
                self.noise_case = match value {
                    "fixed" => NoiseCase::Fixed,
                    "uniform" => NoiseCase::Uniform,
                    "gaussian_curve" => NoiseCase::GaussianCurve,
                    _ => return Err(HsidError::InvalidArgument(format!("{key}: expected fixed/uniform/gaussian_curve"))),
                }
            }
            "noise.sigma" => self.sigma = parse(key, value)?,
            "noise.sigma_max" => self.sigma_max = parse(key, value)?,
            "noise.beta" => self.beta = parse(key, value)?,
            "noise.eta" => self.eta = parse(key, value)?,
            "seed.noise" => self.noise_seed = parse(key, value)?,
            "seed.init" => self.init_seed = parse(key, value)?,
            "seed.shuffle" => self.shuffle_seed = parse(key, value)?,
            "model.k" => self.adjacent_bands = parse(key, value)?,
            "model.multi_scale" => self.multi_scale = parse_bool(key, value)?,
            "model.multi_level" => self.multi_level = parse_bool(key, value)?,
            "model.branch_relu" => self.branch_relu = parse_bool(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.max_iterations" => self.max_iterations = parse_optional(key, value)?,
            "train.snapshot_every" => self.snapshot_every = parse_optional(key, value)?,
            "train.patch_size" => self.patch_size = parse(key, value)?,
            "train.stride" => self.stride = parse(key, value)?,
            "train.augment_rotations" => {
                self.rotations = parse_list::<u32>(key, value)?
                    .into_iter()
                    .map(Rotation::from_degrees)
                    .collect::<Result<_>>()?
            }
            "train.augment_scales" => self.scales = parse_list(key, value)?,
            "optim.alpha" => self.optimizer.alpha = parse(key, value)?,
            "optim.beta1" => self.optimizer.beta1 = parse(key, value)?,
            "optim.beta2" => self.optimizer.beta2 = parse(key, value)?,
            "optim.epsilon" => self.optimizer.epsilon = parse(key, value)?,
            "optim.decay_every" => {
                self.optimizer.decay = match parse_optional(key, value)? {
                    None => None,
                    Some(every) => Some(StepDecay { every, factor: self.optimizer.decay.map_or(0.1, |d| d.factor) }),
                }
            }
            "optim.decay_factor" => {
                let factor = parse(key, value)?;
                if let Some(d) = &mut self.optimizer.decay {
                    d.factor = factor;
                } else {
                    self.optimizer.decay = Some(StepDecay { every: u64::MAX, factor });
                }
            }
            "output.dir" => self.out_dir = PathBuf::from(value),
            "output.noisy" => self.noisy_out = PathBuf::from(value),
            "output.clean" => self.clean_out = PathBuf::from(value),
            "output.sigma_csv" => self.sigma_csv = PathBuf::from(value),
            "output.checkpoint" => self.checkpoint = PathBuf::from(value),
            "output.loss_trace" => self.loss_trace = PathBuf::from(value),
            "output.snapshots" => self.snapshot_dir = PathBuf::from(value),
            "output.eval_csv" => self.eval_csv = PathBuf::from(value),
            "output.ksweep_csv" => self.ksweep_csv = PathBuf::from(value),
            "ksweep.k_list" => self.k_list = parse_list(key, value)?,
            _ => return Err(HsidError::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        match self.noise_case {
            NoiseCase::Fixed => NoiseSpec::fixed(self.sigma, self.noise_seed),
            NoiseCase::Uniform => NoiseSpec::uniform(self.sigma_max, self.noise_seed),
            NoiseCase::GaussianCurve => NoiseSpec::gaussian_curve(self.beta, self.eta, self.noise_seed),
        }
    }

    pub fn architecture(&self) -> ArchitectureSpec {
        ArchitectureSpec { branch_relu: self.branch_relu, ..ArchitectureSpec::default() }
            .with_adjacent_bands(self.adjacent_bands)
            .with_multi_scale(self.multi_scale)
            .with_multi_level(self.multi_level)
    }

    pub fn augment(&self) -> AugmentSpec {
        AugmentSpec { rotations: self.rotations.clone(), scales: self.scales.clone() }
    }

    /// Root for relative output paths: `HSID_OUT_DIR` if set, else `output.dir`.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| self.out_dir.clone())
    }

    pub fn output_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_root().join(p)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            shuffle_seed: self.shuffle_seed,
            init_seed: self.init_seed,
            max_iterations: self.max_iterations,
            snapshot_every: self.snapshot_every,
            snapshot_dir: self.snapshot_every.map(|_| self.output_path(&self.snapshot_dir)),
            loss_trace_path: Some(self.output_path(&self.loss_trace)),
        }
    }

    pub fn clean_path(&self) -> Result<&Path> {
        self.clean.as_deref().ok_or_else(|| HsidError::MissingSetting("data.clean".into()))
    }
}

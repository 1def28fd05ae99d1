//! End-to-end experiment plumbing shared by the `hsid` subcommands: load and
//! normalise the clean cube, hold out the test region, build the augmented
//! noisy training set, train, and score the held-out region.

use log::{info, warn};

use crate::config::{HarnessConfig, Normalization};
use crate::cube::{load_cube, HsiCube};
use crate::error::{HsidError, Result};
use crate::inference::denoise_cube_with;
use crate::metrics::{report, QualityReport};
use crate::model::{ArchitectureSpec, ModelParams};
use crate::noise::add_noise;
use crate::pipeline::{augment, extract_patches, split_spatial, PatchSample};
use crate::rng::derive_seed;
use crate::tensor::Scalar;
use crate::trainer::{train, TrainOutcome};

/// Seed index reserved for the held-out test cube's noise, far from the
/// indices used by augmented training cubes.
pub const TEST_NOISE_INDEX: u64 = u32::MAX as u64;

pub fn normalize(cube: &HsiCube, mode: Normalization) -> HsiCube {
    match mode {
        Normalization::None => cube.clone(),
        Normalization::Band => cube.normalize_bands().0,
        Normalization::Global => cube.normalize_global().0,
    }
}

/// Clean cube from `data.clean`, normalised per `data.normalize`.
pub fn load_clean(cfg: &HarnessConfig) -> Result<HsiCube> {
    let cube = load_cube(cfg.clean_path()?)?;
    Ok(normalize(&cube, cfg.normalize))
}

/// Training pieces and optional held-out test cube.
#[derive(Debug, Clone)]
pub struct Partition {
    pub train: Vec<HsiCube>,
    pub test: Option<HsiCube>,
}

pub fn partition(clean: &HsiCube, cfg: &HarnessConfig) -> Result<Partition> {
    match cfg.test_region {
        None => Ok(Partition { train: vec![clean.clone()], test: None }),
        Some(region) => {
            let split = split_spatial(clean, region)?;
            Ok(Partition { train: split.train.into_iter().map(|(_, c)| c).collect(), test: Some(split.test) })
        }
    }
}

/// Augments every training piece, adds independent noise to each augmented
/// copy and cuts the result into patches.
pub fn build_dataset<T: Scalar>(pieces: &[HsiCube], cfg: &HarnessConfig, k_adjacent: usize) -> Result<Vec<PatchSample<T>>> {
    let aug = cfg.augment();
    let mut samples = Vec::new();
    let mut index = 0u64;
    for piece in pieces {
        for variant in augment(piece, &aug)? {
            let spec = cfg.noise_spec().with_seed(derive_seed(cfg.noise_seed, index));
            index += 1;
            let noisy = add_noise(&variant, &spec)?;
            samples.extend(extract_patches(&noisy, &variant, cfg.patch_size, cfg.stride, k_adjacent)?);
        }
    }
    info!("{} training patches from {index} augmented cubes", samples.len());
    if samples.is_empty() {
        warn!("training set is empty");
    }
    Ok(samples)
}

pub fn noisy_test_cube(test: &HsiCube, cfg: &HarnessConfig) -> Result<HsiCube> {
    add_noise(test, &cfg.noise_spec().with_seed(derive_seed(cfg.noise_seed, TEST_NOISE_INDEX)))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub noisy: QualityReport,
    pub denoised: QualityReport,
}

/// Scores the noisy input and the network output against the clean test cube.
pub fn evaluate<T: Scalar>(
    clean: &HsiCube,
    noisy: &HsiCube,
    params: &ModelParams<T>,
    spec: &ArchitectureSpec,
) -> Result<Evaluation> {
    let denoised = denoise_cube_with(noisy, params, spec, None)?;
    Ok(Evaluation { noisy: report(clean, noisy)?, denoised: report(clean, &denoised)? })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub training: TrainOutcome<f32>,
    pub evaluation: Option<Evaluation>,
    pub samples: usize,
}

/// Full run for one architecture: data, single-precision training and, when a
/// test region is configured, held-out evaluation.
pub fn run(clean: &HsiCube, cfg: &HarnessConfig, spec: &ArchitectureSpec) -> Result<ExperimentOutcome> {
    if spec.adjacent_bands >= clean.bands() {
        return Err(HsidError::TooFewBands { k: spec.adjacent_bands, bands: clean.bands() });
    }
    let parts = partition(clean, cfg)?;
    let data = build_dataset::<f32>(&parts.train, cfg, spec.adjacent_bands)?;
    let training = train(&data, spec, &cfg.train_config(), &cfg.optimizer)?;
    let evaluation = match &parts.test {
        Some(test) => {
            let noisy = noisy_test_cube(test, cfg)?;
            Some(evaluate(test, &noisy, &training.params.cast::<f64>(), spec)?)
        }
        None => None,
    };
    Ok(ExperimentOutcome { training, evaluation, samples: data.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube::Rect;
    use crate::synth::{synthesize, SceneSpec};

    #[test]
    fn dataset_counts_follow_partition_and_augmentation() {
        let clean = synthesize(&SceneSpec::new(30, 20, 5, 1)).unwrap();
        let mut cfg = HarnessConfig::parse("train.patch_size = 10\ntrain.stride = 10\ntrain.augment_scales = 1").unwrap();
        cfg.test_region = Some(Rect::new(20, 0, 10, 20));
        let parts = partition(&clean, &cfg).unwrap();
        assert_eq!(parts.train.len(), 1);
        assert_eq!(parts.test.as_ref().unwrap().width(), 10);
        let data = build_dataset::<f32>(&parts.train, &cfg, 2).unwrap();
        // 20x20 piece: each rotation gives 2x2 windows in 5 bands.
        assert_eq!(data.len(), 4 * 4 * 5);
    }

    #[test]
    fn augmented_copies_get_independent_noise() {
        let clean = HsiCube::from_fn(10, 10, 3, |_, _, _| 0.5);
        let cfg = HarnessConfig::parse(
            "train.patch_size = 10\ntrain.stride = 10\ntrain.augment_rotations = 0,180\ntrain.augment_scales = 1",
        )
        .unwrap();
        let data = build_dataset::<f64>(&[clean], &cfg, 2).unwrap();
        assert_eq!(data.len(), 6);
        // The constant cube is rotation invariant, so equal noise would give equal patches.
        assert_ne!(data[0].y_spatial, data[3].y_spatial);
        assert_eq!(data[0].label_clean, data[3].label_clean);
    }
}

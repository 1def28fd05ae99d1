//! Training data preparation: adjacent-band windows, patch extraction,
//! rotation/rescale augmentation and the spatial train/test split.

use log::warn;
use rayon::prelude::*;

use crate::cube::{HsiCube, Rect};
use crate::error::{HsidError, Result};
use crate::tensor::{Scalar, Tensor};

/// Indices of the `k_adjacent` bands nearest to `band`, excluding `band`
/// itself, in ascending order.
///
/// The window is symmetric (`K/2` on each side) when it fits; near the ends of
/// the spectrum it slides inward so that exactly `K` in-range bands are used.
pub fn adjacent_band_indices(bands: usize, band: usize, k_adjacent: usize) -> Result<Vec<usize>> {
    if k_adjacent == 0 {
        return Err(HsidError::InvalidArgument("K must be at least 1".into()));
    }
    if k_adjacent >= bands {
        return Err(HsidError::TooFewBands { k: k_adjacent, bands });
    }
    if band >= bands {
        return Err(HsidError::InvalidArgument(format!("band {band} out of range 0..{bands}")));
    }
    let below = k_adjacent / 2;
    let start = band.saturating_sub(below).min(bands - 1 - k_adjacent);
    Ok((start..=start + k_adjacent).filter(|&b| b != band).collect())
}

/// The `K` adjacent bands of `band` as a `[K, H, W]` tensor.
pub fn adjacent_bands<T: Scalar>(cube: &HsiCube, band: usize, k_adjacent: usize) -> Result<Tensor<T>> {
    let idx = adjacent_band_indices(cube.bands(), band, k_adjacent)?;
    Ok(cube.bands_tensor(&idx))
}

/// One training example: noisy band, its noisy spectral neighbours and the clean band.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample<T> {
    pub y_spatial: Tensor<T>,
    pub y_spectral: Tensor<T>,
    pub label_clean: Tensor<T>,
    pub band: usize,
    pub x: usize,
    pub y: usize,
}

impl<T: Scalar> PatchSample<T> {
    /// Residual target `clean - noisy`.
    pub fn residual_target(&self) -> Result<Tensor<T>> {
        self.label_clean.expect_shape(self.y_spatial.shape(), "residual target")?;
        let data = self
            .label_clean
            .data()
            .iter()
            .zip(self.y_spatial.data())
            .map(|(&x, &y)| x - y)
            .collect();
        Tensor::zeros(self.y_spatial.shape()).with_data(data)
    }
}

/// Top-left corners of every aligned `patch x patch` window.
pub fn patch_origins(width: usize, height: usize, patch: usize, stride: usize) -> Vec<(usize, usize)> {
    if patch == 0 || stride == 0 || patch > width || patch > height {
        return Vec::new();
    }
    let xs: Vec<usize> = (0..=width - patch).step_by(stride).collect();
    (0..=height - patch)
        .step_by(stride)
        .flat_map(|y| xs.iter().map(move |&x| (x, y)))
        .collect()
}

/// Closed-form sample count `B * (floor((W-p)/s) + 1) * (floor((H-p)/s) + 1)`.
pub fn patch_count(width: usize, height: usize, bands: usize, patch: usize, stride: usize) -> usize {
    if patch == 0 || stride == 0 || patch > width || patch > height {
        return 0;
    }
    bands * ((width - patch) / stride + 1) * ((height - patch) / stride + 1)
}

fn crop_plane<T: Scalar>(plane: &[f64], width: usize, x: usize, y: usize, p: usize, out: &mut Vec<T>) {
    for row in y..y + p {
        out.extend(plane[row * width + x..row * width + x + p].iter().map(|&v| T::from_f64_lossy(v)));
    }
}

/// Cuts every band of a noisy/clean cube pair into aligned patches.
///
/// Output order is band-major, then row-major over window origins.
pub fn extract_patches<T: Scalar>(
    noisy: &HsiCube,
    clean: &HsiCube,
    patch: usize,
    stride: usize,
    k_adjacent: usize,
) -> Result<Vec<PatchSample<T>>> {
    noisy.check_same_dims(clean, "extract_patches")?;
    if patch == 0 || stride == 0 {
        return Err(HsidError::InvalidArgument("patch size and stride must be positive".into()));
    }
    if k_adjacent >= noisy.bands() {
        return Err(HsidError::TooFewBands { k: k_adjacent, bands: noisy.bands() });
    }
    let origins = patch_origins(noisy.width(), noisy.height(), patch, stride);
    if origins.is_empty() {
        warn!(
            "{}x{} cube is smaller than the {patch}x{patch} patch; no samples extracted",
            noisy.width(),
            noisy.height()
        );
        return Ok(Vec::new());
    }
    let w = noisy.width();
    let per_band: Vec<Vec<PatchSample<T>>> = (0..noisy.bands())
        .into_par_iter()
        .map(|band| -> Result<Vec<PatchSample<T>>> {
            let neighbours = adjacent_band_indices(noisy.bands(), band, k_adjacent)?;
            Ok(origins
                .iter()
                .map(|&(x, y)| {
                    let mut ys = Vec::with_capacity(patch * patch);
                    crop_plane(noisy.band(band), w, x, y, patch, &mut ys);
                    let mut lc = Vec::with_capacity(patch * patch);
                    crop_plane(clean.band(band), w, x, y, patch, &mut lc);
                    let mut spec = Vec::with_capacity(k_adjacent * patch * patch);
                    for &nb in &neighbours {
                        crop_plane(noisy.band(nb), w, x, y, patch, &mut spec);
                    }
                    PatchSample {
                        y_spatial: Tensor::zeros(&[1, patch, patch]).with_data(ys).expect("patch"),
                        y_spectral: Tensor::zeros(&[k_adjacent, patch, patch]).with_data(spec).expect("patch"),
                        label_clean: Tensor::zeros(&[1, patch, patch]).with_data(lc).expect("patch"),
                        band,
                        x,
                        y,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_band.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub fn from_degrees(deg: u32) -> Result<Self> {
        match deg {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            180 => Ok(Rotation::R180),
            270 => Ok(Rotation::R270),
            other => Err(HsidError::InvalidArgument(format!("rotation must be 0/90/180/270, got {other}"))),
        }
    }

    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub rotations: Vec<Rotation>,
    pub scales: Vec<f64>,
}

impl Default for AugmentSpec {
    /// All four rotations and the scales {0.5, 1, 1.5, 2}.
    fn default() -> Self {
        AugmentSpec {
            rotations: vec![Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270],
            scales: vec![0.5, 1.0, 1.5, 2.0],
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec { rotations: vec![Rotation::R0], scales: vec![1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotations.is_empty() || self.scales.is_empty() {
            return Err(HsidError::InvalidArgument("augmentation lists must be nonempty".into()));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(HsidError::InvalidArgument(format!("scale must be positive, got {s}")));
        }
        Ok(())
    }
}

/// Rotates every band clockwise by a multiple of 90 degrees.
pub fn rotate(cube: &HsiCube, rotation: Rotation) -> HsiCube {
    let (w, h) = (cube.width(), cube.height());
    match rotation {
        Rotation::R0 => cube.clone(),
        Rotation::R90 => HsiCube::from_fn(h, w, cube.bands(), |x, y, b| cube.get(y, h - 1 - x, b)),
        Rotation::R180 => HsiCube::from_fn(w, h, cube.bands(), |x, y, b| cube.get(w - 1 - x, h - 1 - y, b)),
        Rotation::R270 => HsiCube::from_fn(h, w, cube.bands(), |x, y, b| cube.get(w - 1 - y, x, b)),
    }
}

/// Corner-aligned bilinear sample positions: output pixel `i` of `n_out` maps
/// to `i * (n_in - 1) / (n_out - 1)` in the input.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let pos = if n_out > 1 { i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64 } else { 0.0 };
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Resizes every band by `scale` with corner-aligned bilinear interpolation.
/// Output size is `round(W * scale) x round(H * scale)` (at least 1).
pub fn rescale(cube: &HsiCube, scale: f64) -> HsiCube {
    if scale == 1.0 {
        return cube.clone();
    }
    let w2 = ((cube.width() as f64 * scale).round() as usize).max(1);
    let h2 = ((cube.height() as f64 * scale).round() as usize).max(1);
    let xs = bilinear_taps(cube.width(), w2);
    let ys = bilinear_taps(cube.height(), h2);
    HsiCube::from_fn(w2, h2, cube.bands(), |x, y, b| {
        let (x0, x1, fx) = xs[x];
        let (y0, y1, fy) = ys[y];
        let top = cube.get(x0, y0, b) * (1.0 - fx) + cube.get(x1, y0, b) * fx;
        let bottom = cube.get(x0, y1, b) * (1.0 - fx) + cube.get(x1, y1, b) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Cross product `rotations x scales` applied to a clean cube. Noise is added
/// afterwards so every augmented copy gets independent noise.
pub fn augment(cube: &HsiCube, spec: &AugmentSpec) -> Result<Vec<HsiCube>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.rotations.len() * spec.scales.len());
    for &rotation in &spec.rotations {
        let rotated = rotate(cube, rotation);
        for &scale in &spec.scales {
            out.push(rescale(&rotated, scale));
        }
    }
    Ok(out)
}

/// Disjoint spatial split of a cube around a held-out test rectangle.
#[derive(Debug, Clone)]
pub struct SpatialSplit {
    pub test: HsiCube,
    pub test_region: Rect,
    /// Rectangular pieces covering the complement of the test region.
    pub train: Vec<(Rect, HsiCube)>,
}

impl SpatialSplit {
    pub fn train_area(&self) -> usize {
        self.train.iter().map(|(r, _)| r.area()).sum()
    }
}

/// Holds out `test_region`; the rest of the frame is returned as up to four
/// rectangles (full-width strips above and below, side pieces beside it).
pub fn split_spatial(cube: &HsiCube, test_region: Rect) -> Result<SpatialSplit> {
    let test = cube.crop(test_region)?;
    let (w, h) = (cube.width(), cube.height());
    let r = test_region;
    let candidates = [
        Rect::new(0, 0, w, r.y),
        Rect::new(0, r.y + r.height, w, h - r.y - r.height),
        Rect::new(0, r.y, r.x, r.height),
        Rect::new(r.x + r.width, r.y, w - r.x - r.width, r.height),
    ];
    let train = candidates
        .into_iter()
        .filter(|c| c.area() > 0)
        .map(|c| cube.crop(c).map(|sub| (c, sub)))
        .collect::<Result<Vec<_>>>()?;
    if train.is_empty() {
        warn!("test region covers the whole cube; training split is empty");
    }
    Ok(SpatialSplit { test, test_region, train })
}

//! Whole-cube denoising, one band at a time, plus PGM/PPM emission.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use crate::checkpoint::load_checkpoint;
use crate::cube::{load_cube, save_cube, HsiCube};
use crate::error::{HsidError, Result};
use crate::model::{denoise_patch, ArchitectureSpec, ModelParams};
use crate::pipeline::adjacent_band_indices;
use crate::tensor::{Scalar, Tensor};

/// Inputs must lie in this range. It is wider than the noise simulator's
/// guard because noisy cubes legitimately overshoot `[0, 1]`; values far
/// outside it mean the cube was never normalised.
pub const INFERENCE_GUARD: (f64, f64) = (-3.0, 4.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tiling {
    pub tile: usize,
    pub overlap: usize,
}

impl Tiling {
    pub fn validate(&self, spec: &ArchitectureSpec) -> Result<()> {
        let r = spec.receptive_radius();
        if self.tile < 2 * r + 1 {
            return Err(HsidError::InvalidArgument(format!(
                "tile size {} is below the receptive-field diameter {}",
                self.tile,
                2 * r + 1
            )));
        }
        if self.overlap < r {
            return Err(HsidError::InvalidArgument(format!(
                "tile overlap {} is below the receptive-field radius {r}",
                self.overlap
            )));
        }
        if self.tile <= 2 * self.overlap {
            return Err(HsidError::InvalidArgument(format!(
                "tile size {} leaves no interior with overlap {}",
                self.tile, self.overlap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseJob {
    pub input: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
    pub tiling: Option<Tiling>,
}

/// `(start, len, keep_from, keep_to)` windows along one axis: each tile's
/// interior `[keep_from, keep_to)` (in global coordinates) is written back,
/// and the interiors partition `0..n`.
fn tile_windows(n: usize, tile: usize, overlap: usize) -> Vec<(usize, usize, usize, usize)> {
    if n <= tile {
        return vec![(0, n, 0, n)];
    }
    let step = tile - 2 * overlap;
    let mut out = Vec::new();
    let mut keep_from = 0;
    while keep_from < n {
        let start = keep_from.saturating_sub(overlap).min(n - tile);
        // A tile pinned to the far border has no cut edge there and keeps the rest.
        let keep_to = if start == n - tile { n } else { (keep_from + step).min(n) };
        out.push((start, tile, keep_from, keep_to));
        keep_from = keep_to;
    }
    out
}

fn crop<T: Scalar>(t: &Tensor<T>, x0: usize, y0: usize, w: usize, h: usize) -> Tensor<T> {
    let (c, _, full_w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut data = Vec::with_capacity(c * w * h);
    for ch in 0..c {
        let plane = t.channel(ch);
        for y in y0..y0 + h {
            data.extend_from_slice(&plane[y * full_w + x0..y * full_w + x0 + w]);
        }
    }
    Tensor::zeros(&[c, h, w]).with_data(data).expect("crop size")
}

fn denoise_band<T: Scalar>(
    cube: &HsiCube,
    band: usize,
    params: &ModelParams<T>,
    spec: &ArchitectureSpec,
    tiling: Option<Tiling>,
) -> Result<Vec<f64>> {
    let neighbours = adjacent_band_indices(cube.bands(), band, spec.adjacent_bands)?;
    let y_spatial: Tensor<T> = cube.band_tensor(band);
    let y_spectral: Tensor<T> = cube.bands_tensor(&neighbours);
    let Some(t) = tiling else {
        let out = denoise_patch(&y_spatial, &y_spectral, params, spec)?;
        return Ok(out.data().iter().map(|v| v.as_f64()).collect());
    };
    let (w, h) = (cube.width(), cube.height());
    let mut out = vec![0.0; w * h];
    for &(ys, yl, yk0, yk1) in &tile_windows(h, t.tile, t.overlap) {
        for &(xs, xl, xk0, xk1) in &tile_windows(w, t.tile, t.overlap) {
            let piece = denoise_patch(
                &crop(&y_spatial, xs, ys, xl, yl),
                &crop(&y_spectral, xs, ys, xl, yl),
                params,
                spec,
            )?;
            let d = piece.data();
            for y in yk0..yk1 {
                for x in xk0..xk1 {
                    out[y * w + x] = d[(y - ys) * xl + (x - xs)].as_f64();
                }
            }
        }
    }
    Ok(out)
}

/// Denoises every band `k` as `y_k + Net(y_k, adjacent_bands(k))`.
///
/// Bands run in parallel; the output is assembled in band order so the result
/// is deterministic. With `tiling`, each band is processed in overlapping tiles
/// and only tile interiors are kept.
pub fn denoise_cube_with<T: Scalar>(
    cube: &HsiCube,
    params: &ModelParams<T>,
    spec: &ArchitectureSpec,
    tiling: Option<Tiling>,
) -> Result<HsiCube> {
    spec.validate()?;
    params.check_spec(spec)?;
    if spec.adjacent_bands >= cube.bands() {
        return Err(HsidError::TooFewBands { k: spec.adjacent_bands, bands: cube.bands() });
    }
    cube.check_range(INFERENCE_GUARD.0, INFERENCE_GUARD.1)?;
    if let Some(t) = tiling {
        t.validate(spec)?;
    }
    let bands: Vec<Vec<f64>> = (0..cube.bands())
        .into_par_iter()
        .map(|b| denoise_band(cube, b, params, spec, tiling))
        .collect::<Result<_>>()?;
    HsiCube::new(cube.width(), cube.height(), cube.bands(), bands.concat())
}

/// Untiled double-precision denoising.
pub fn denoise_cube(cube: &HsiCube, params: &ModelParams<f64>, spec: &ArchitectureSpec) -> Result<HsiCube> {
    denoise_cube_with(cube, params, spec, None)
}

/// Loads the input cube and checkpoint named by `job`, denoises in double
/// precision and writes the output cube.
pub fn run_job(job: &DenoiseJob) -> Result<HsiCube> {
    let cube = load_cube(&job.input)?;
    let ckpt = load_checkpoint(&job.checkpoint, None)?;
    info!(
        "denoising {}x{}x{} cube with K={}",
        cube.width(),
        cube.height(),
        cube.bands(),
        ckpt.spec.adjacent_bands
    );
    let params: ModelParams<f64> = ckpt.params.cast();
    let out = denoise_cube_with(&cube, &params, &ckpt.spec, job.tiling)?;
    save_cube(&out, &job.output)?;
    Ok(out)
}

/// `[0, 1]` to a 16-bit sample, clipping out-of-range values.
pub fn to_u16_sample(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16
}

fn check_band(cube: &HsiCube, band: usize) -> Result<()> {
    if band >= cube.bands() {
        return Err(HsidError::InvalidArgument(format!(
            "band index {band} out of range (cube has {} bands, indices start at 0)",
            cube.bands()
        )));
    }
    Ok(())
}

fn write_netpbm(path: &Path, header: String, samples: impl Iterator<Item = u16>) -> Result<()> {
    let mut bytes = header.into_bytes();
    for s in samples {
        bytes.extend_from_slice(&s.to_be_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| HsidError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| HsidError::io(path, e))
}

/// Writes one band as a 16-bit binary PGM (P5).
pub fn emit_band_image(cube: &HsiCube, band: usize, path: impl AsRef<Path>) -> Result<()> {
    check_band(cube, band)?;
    let header = format!("P5\n{} {}\n65535\n", cube.width(), cube.height());
    write_netpbm(path.as_ref(), header, cube.band(band).iter().map(|&v| to_u16_sample(v)))
}

/// Writes three bands as the red, green and blue channels of a 16-bit binary PPM (P6).
pub fn emit_pseudocolor(cube: &HsiCube, bands: [usize; 3], path: impl AsRef<Path>) -> Result<()> {
    for &b in &bands {
        check_band(cube, b)?;
    }
    let header = format!("P6\n{} {}\n65535\n", cube.width(), cube.height());
    let [r, g, b] = bands.map(|i| cube.band(i));
    let samples = (0..cube.plane()).flat_map(|p| [r[p], g[p], b[p]]).map(to_u16_sample);
    write_netpbm(path.as_ref(), header, samples)
}

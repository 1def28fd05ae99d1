//! Hyperspectral cubes and the HSIC v1 file format.
//!
//! HSIC v1 layout (all integers little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"HSIC"`                |
//! | 4      | 4    | version (u32, = 1)             |
//! | 8      | 12   | width, height, bands (u32 each)|
//! | 20     | 4·N  | N = W·H·B `f32` samples, BSQ   |

use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{HsidError, Result};
use crate::tensor::{Scalar, Tensor};

pub const HSIC_MAGIC: [u8; 4] = *b"HSIC";
pub const HSIC_VERSION: u32 = 1;
const HSIC_HEADER: usize = 20;

/// `W x H x B` cube stored band-sequentially: band-major, then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    width: usize,
    height: usize,
    bands: usize,
    data: Vec<f64>,
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Rect { x, y, width, height }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.x + other.width
            && other.x < self.x + self.width
            && self.y < other.y + other.height
            && other.y < self.y + self.height
    }
}

/// Affine record of one band's normalisation: `norm = (v - min) / (max - min)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandRange {
    pub min: f64,
    pub max: f64,
    /// The band was constant and has been mapped to zero.
    pub constant: bool,
}

impl BandRange {
    pub fn denormalize(&self, v: f64) -> f64 {
        self.min + v * (self.max - self.min)
    }
}

impl HsiCube {
    pub fn new(width: usize, height: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(HsidError::InvalidArgument(format!(
                "cube dimensions must be positive, got {width}x{height}x{bands}"
            )));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(bands))
            .ok_or_else(|| HsidError::DimensionOverflow(format!("{width}x{height}x{bands}")))?;
        if n != data.len() {
            return Err(HsidError::shape("HsiCube::new", "element count", n, data.len()));
        }
        Ok(HsiCube { width, height, bands, data })
    }

    pub fn zeros(width: usize, height: usize, bands: usize) -> Self {
        HsiCube { width, height, bands, data: vec![0.0; width * height * bands] }
    }

    /// Builds a cube from `f(x, y, band)`.
    pub fn from_fn(width: usize, height: usize, bands: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * bands);
        for b in 0..bands {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(x, y, b));
                }
            }
        }
        HsiCube { width, height, bands, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn plane(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn band(&self, b: usize) -> &[f64] {
        &self.data[b * self.plane()..(b + 1) * self.plane()]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f64] {
        let p = self.plane();
        &mut self.data[b * p..(b + 1) * p]
    }

    pub fn get(&self, x: usize, y: usize, b: usize) -> f64 {
        self.data[b * self.plane() + y * self.width + x]
    }

    /// Spectrum of pixel `(x, y)` across all bands.
    pub fn spectrum(&self, x: usize, y: usize) -> Vec<f64> {
        (0..self.bands).map(|b| self.get(x, y, b)).collect()
    }

    pub fn same_dims(&self, other: &HsiCube) -> bool {
        self.width == other.width && self.height == other.height && self.bands == other.bands
    }

    pub(crate) fn check_same_dims(&self, other: &HsiCube, context: &str) -> Result<()> {
        for (dim, a, b) in [
            ("width", self.width, other.width),
            ("height", self.height, other.height),
            ("bands", self.bands, other.bands),
        ] {
            if a != b {
                return Err(HsidError::shape(context, dim, a, b));
            }
        }
        Ok(())
    }

    /// Sub-cube covering `rect` (all bands).
    pub fn crop(&self, rect: Rect) -> Result<HsiCube> {
        if rect.width == 0 || rect.height == 0 || rect.x + rect.width > self.width || rect.y + rect.height > self.height {
            return Err(HsidError::InvalidArgument(format!(
                "region {rect:?} outside {}x{} cube",
                self.width, self.height
            )));
        }
        Ok(HsiCube::from_fn(rect.width, rect.height, self.bands, |x, y, b| {
            self.get(rect.x + x, rect.y + y, b)
        }))
    }

    /// Band `b` as a `[1, H, W]` tensor.
    pub fn band_tensor<T: Scalar>(&self, b: usize) -> Tensor<T> {
        let data = self.band(b).iter().map(|&v| T::from_f64_lossy(v)).collect();
        Tensor::zeros(&[1, self.height, self.width])
            .with_data(data)
            .expect("band plane length")
    }

    /// Selected bands stacked as a `[bands.len(), H, W]` tensor.
    pub fn bands_tensor<T: Scalar>(&self, bands: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(bands.len() * self.plane());
        for &b in bands {
            data.extend(self.band(b).iter().map(|&v| T::from_f64_lossy(v)));
        }
        Tensor::zeros(&[bands.len(), self.height, self.width])
            .with_data(data)
            .expect("band stack length")
    }

    /// Errors if any value lies outside `[low, high]`.
    pub fn check_range(&self, low: f64, high: f64) -> Result<()> {
        match self.data.iter().find(|v| !(low..=high).contains(*v)) {
            Some(&value) => Err(HsidError::NotNormalized { value, low, high }),
            None => Ok(()),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Serialises to HSIC v1 bytes.
    pub fn to_hsic_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HSIC_HEADER + 4 * self.data.len());
        out.extend_from_slice(&HSIC_MAGIC);
        for v in [HSIC_VERSION, self.width as u32, self.height as u32, self.bands as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_hsic_bytes(bytes: &[u8]) -> Result<HsiCube> {
        if bytes.len() < HSIC_HEADER {
            return Err(HsidError::Truncated { expected: HSIC_HEADER as u64, found: bytes.len() as u64 });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != HSIC_MAGIC {
            return Err(HsidError::BadMagic { expected: HSIC_MAGIC, found: magic });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        let version = word(1);
        if version != HSIC_VERSION {
            return Err(HsidError::VersionMismatch { found: version, supported: HSIC_VERSION });
        }
        let (w, h, b) = (word(2) as u64, word(3) as u64, word(4) as u64);
        let payload = w
            .checked_mul(h)
            .and_then(|v| v.checked_mul(b))
            .and_then(|v| v.checked_mul(4))
            .filter(|&v| usize::try_from(v).is_ok())
            .ok_or_else(|| HsidError::DimensionOverflow(format!("{w}x{h}x{b}")))?;
        let found = (bytes.len() - HSIC_HEADER) as u64;
        if found < payload {
            return Err(HsidError::Truncated { expected: payload, found });
        }
        if found > payload {
            return Err(HsidError::InvalidArgument(format!(
                "{} trailing bytes after HSIC payload",
                found - payload
            )));
        }
        let data = bytes[HSIC_HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        HsiCube::new(w as usize, h as usize, b as usize, data)
    }

    /// Per-band min-max normalisation to `[0, 1]`. Constant bands map to zero
    /// (with a warning) instead of failing.
    pub fn normalize_bands(&self) -> (HsiCube, Vec<BandRange>) {
        let mut out = self.clone();
        let mut ranges = Vec::with_capacity(self.bands);
        for b in 0..self.bands {
            let band = out.band_mut(b);
            let (min, max) = band
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let constant = max <= min;
            if constant {
                warn!("band {b} is constant ({min}); normalised to zero");
                band.fill(0.0);
            } else {
                let span = max - min;
                band.iter_mut().for_each(|v| *v = (*v - min) / span);
            }
            ranges.push(BandRange { min, max, constant });
        }
        (out, ranges)
    }

    /// Alternative to [`normalize_bands`](Self::normalize_bands): one affine map
    /// for the whole cube, preserving relative band intensities.
    pub fn normalize_global(&self) -> (HsiCube, BandRange) {
        let (min, max) = self.min_max();
        let mut out = self.clone();
        let constant = max <= min;
        if constant {
            warn!("cube is constant ({min}); normalised to zero");
            out.data.fill(0.0);
        } else {
            out.data.iter_mut().for_each(|v| *v = (*v - min) / (max - min));
        }
        (out, BandRange { min, max, constant })
    }
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cube.to_hsic_bytes()).map_err(|e| HsidError::io(path, e))
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HsidError::io(path, e))?;
    HsiCube::from_hsic_bytes(&bytes)
}

/// Sample encodings accepted by [`import_raw_bsq`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawSample {
    U8,
    U16Le,
    I16Le,
    F32Le,
    F64Le,
}

impl RawSample {
    pub fn size(self) -> usize {
        match self {
            RawSample::U8 => 1,
            RawSample::U16Le | RawSample::I16Le => 2,
            RawSample::F32Le => 4,
            RawSample::F64Le => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            RawSample::U8 => b[0] as f64,
            RawSample::U16Le => u16::from_le_bytes([b[0], b[1]]) as f64,
            RawSample::I16Le => i16::from_le_bytes([b[0], b[1]]) as f64,
            RawSample::F32Le => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            RawSample::F64Le => f64::from_le_bytes(b.try_into().expect("8 bytes")),
        }
    }
}

impl std::str::FromStr for RawSample {
    type Err = HsidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(RawSample::U8),
            "u16" | "u16le" => Ok(RawSample::U16Le),
            "i16" | "i16le" => Ok(RawSample::I16Le),
            "f32" | "f32le" => Ok(RawSample::F32Le),
            "f64" | "f64le" => Ok(RawSample::F64Le),
            other => Err(HsidError::InvalidArgument(format!("unknown raw sample type {other:?}"))),
        }
    }
}

/// Reads a headerless band-sequential file with caller-supplied dimensions.
pub fn import_raw_bsq(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    bands: usize,
    sample: RawSample,
) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HsidError::io(path, e))?;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(bands))
        .ok_or_else(|| HsidError::DimensionOverflow(format!("{width}x{height}x{bands}")))?;
    let expected = n
        .checked_mul(sample.size())
        .ok_or_else(|| HsidError::DimensionOverflow(format!("{n} samples")))?;
    if bytes.len() < expected {
        return Err(HsidError::Truncated { expected: expected as u64, found: bytes.len() as u64 });
    }
    let data = bytes[..expected].chunks_exact(sample.size()).map(|c| sample.decode(c)).collect();
    HsiCube::new(width, height, bands, data)
}

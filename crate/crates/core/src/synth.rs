//! Synthetic hyperspectral scenes for tests and desk-scale experiments.
//!
//! A scene mixes a few smooth endmember spectra with abundance maps that
//! combine slowly varying fields and piecewise-constant shapes with sharp
//! edges, then rescales the cube globally to `[0, 1]`.

use rand::Rng;

use crate::cube::HsiCube;
use crate::error::{HsidError, Result};
use crate::rng;

const SYNTH_STREAM: u64 = (1 << 62) + 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub endmembers: usize,
    pub shapes: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(width: usize, height: usize, bands: usize, seed: u64) -> Self {
        SceneSpec { width, height, bands, endmembers: 4, shapes: 6, seed }
    }
}

enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) < r * r,
        }
    }
}

pub fn synthesize(spec: &SceneSpec) -> Result<HsiCube> {
    if spec.width == 0 || spec.height == 0 || spec.bands == 0 || spec.endmembers == 0 {
        return Err(HsidError::InvalidArgument("scene dimensions must be positive".into()));
    }
    let mut r = rng::stream(spec.seed, SYNTH_STREAM);
    let (w, h, b, m) = (spec.width, spec.height, spec.bands, spec.endmembers);

    // Endmember spectra: sums of broad Gaussian absorption/reflection features.
    let spectra: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let base = r.random_range(0.2..0.6);
            let feats: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| (r.random_range(0.0..1.0), r.random_range(0.08..0.3), r.random_range(-0.3..0.4)))
                .collect();
            (0..b)
                .map(|i| {
                    let t = if b > 1 { i as f64 / (b - 1) as f64 } else { 0.5 };
                    base + feats.iter().map(|(c, s, a)| a * (-(t - c).powi(2) / (2.0 * s * s)).exp()).sum::<f64>()
                })
                .collect()
        })
        .collect();

    // Smooth abundance fields.
    let waves: Vec<Vec<(f64, f64, f64)>> = (0..m)
        .map(|_| {
            (0..3)
                .map(|_| (r.random_range(0.5..3.0), r.random_range(0.5..3.0), r.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect();
    let shapes: Vec<(Shape, usize, f64)> = (0..spec.shapes)
        .map(|_| {
            let shape = if r.random_bool(0.5) {
                let (x0, y0) = (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64));
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + r.random_range(0.15..0.5) * w as f64,
                    y1: y0 + r.random_range(0.15..0.5) * h as f64,
                }
            } else {
                Shape::Disc {
                    cx: r.random_range(0.0..w as f64),
                    cy: r.random_range(0.0..h as f64),
                    r: r.random_range(0.08..0.3) * w.min(h) as f64,
                }
            };
            (shape, r.random_range(0..m), r.random_range(1.5..3.0))
        })
        .collect();

    let mut abundance = vec![0.0; m * w * h];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let mut a: Vec<f64> = waves
                .iter()
                .map(|ws| 1.0 + ws.iter().map(|(fx, fy, ph)| 0.3 * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin()).sum::<f64>())
                .map(|v: f64| v.max(0.01))
                .collect();
            for (shape, which, boost) in &shapes {
                if shape.contains(x as f64, y as f64) {
                    a[*which] += boost;
                }
            }
            let total: f64 = a.iter().sum();
            for (e, v) in a.iter().enumerate() {
                abundance[e * w * h + y * w + x] = v / total;
            }
        }
    }

    let raw = HsiCube::from_fn(w, h, b, |x, y, band| {
        (0..m).map(|e| abundance[e * w * h + y * w + x] * spectra[e][band]).sum()
    });
    Ok(raw.normalize_global().0)
}

//! Additive Gaussian degradation `Y = X + V` with per-band noise levels.
//!
//! Noise levels are quoted on the 0-255 gray scale and divided by 255 when
//! applied to `[0, 1]`-normalised cubes. Band `n` draws its samples from ChaCha8
//! stream `n` of the spec's seed (see [`crate::rng`]), so every band can be
//! generated independently and in parallel with identical results. Noisy values
//! are not clipped.

use rand::Rng;
use rayon::prelude::*;

use crate::cube::HsiCube;
use crate::error::{HsidError, Result};
use crate::rng;

/// Values outside this band mean the cube was not normalised.
pub const NORMALIZED_GUARD: (f64, f64) = (-0.01, 1.01);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    /// Case 1: the same sigma in every band.
    Fixed { sigma: f64 },
    /// Case 2: per-band sigma drawn i.i.d. uniform on `(0, sigma_max]`.
    UniformPerBand { sigma_max: f64 },
    /// Case 3: sigma follows a Gaussian curve along the spectrum, with total
    /// energy `sum sigma_n^2 = beta^2`.
    GaussianCurve { beta: f64, eta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn fixed(sigma: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Fixed { sigma }, seed }
    }

    pub fn uniform(sigma_max: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::UniformPerBand { sigma_max }, seed }
    }

    pub fn gaussian_curve(beta: f64, eta: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::GaussianCurve { beta, eta }, seed }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(HsidError::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        match self.kind {
            NoiseKind::Fixed { sigma } => positive("sigma", sigma),
            NoiseKind::UniformPerBand { sigma_max } => positive("sigma_max", sigma_max),
            NoiseKind::GaussianCurve { beta, eta } => positive("beta", beta).and(positive("eta", eta)),
        }
    }

    /// Noise level of every band on the 0-255 scale.
    pub fn sigma_profile(&self, bands: usize) -> Result<Vec<f64>> {
        self.validate()?;
        if bands == 0 {
            return Err(HsidError::InvalidArgument("band count must be at least 1".into()));
        }
        Ok(match self.kind {
            NoiseKind::Fixed { sigma } => vec![sigma; bands],
            NoiseKind::UniformPerBand { sigma_max } => {
                let mut r = rng::stream(self.seed, rng::streams::SIGMA_DRAWS);
                // 1 - u with u in [0, 1) lands in (0, 1].
                (0..bands).map(|_| sigma_max * (1.0 - r.random::<f64>())).collect()
            }
            NoiseKind::GaussianCurve { beta, eta } => gaussian_curve(beta, eta, bands),
        })
    }
}

/// `sigma_n = beta * sqrt(g(n) / sum_i g(i))`, `g(n) = exp(-(n - B/2)^2 / (2 eta^2))`,
/// for 1-based band numbers `n = 1..=B`; entry `i` of the result is band `n = i + 1`.
fn gaussian_curve(beta: f64, eta: f64, bands: usize) -> Vec<f64> {
    let center = bands as f64 / 2.0;
    let g: Vec<f64> = (1..=bands)
        .map(|n| (-(n as f64 - center).powi(2) / (2.0 * eta * eta)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.iter().map(|gn| beta * (gn / total).sqrt()).collect()
}

/// Returns `cube + V`, where band `n` of `V` is i.i.d. `N(0, (sigma_n / 255)^2)`.
pub fn add_noise(cube: &HsiCube, spec: &NoiseSpec) -> Result<HsiCube> {
    cube.check_range(NORMALIZED_GUARD.0, NORMALIZED_GUARD.1)?;
    let sigmas = spec.sigma_profile(cube.bands())?;
    let mut out = cube.clone();
    let plane = cube.plane();
    out.data_mut()
        .par_chunks_mut(plane)
        .zip(sigmas.par_iter())
        .enumerate()
        .for_each(|(band, (values, &sigma))| {
            let std = sigma / 255.0;
            let mut r = rng::stream(spec.seed, band as u64);
            for v in values.iter_mut() {
                *v += std * rng::standard_normal(&mut r);
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_std(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    }

    #[test]
    fn fixed_profile_is_constant() {
        assert_eq!(NoiseSpec::fixed(25.0, 0).sigma_profile(5).unwrap(), vec![25.0; 5]);
        assert!(NoiseSpec::fixed(25.0, 0).sigma_profile(0).is_err());
        assert!(NoiseSpec::fixed(-1.0, 0).sigma_profile(3).is_err());
        assert!(NoiseSpec::gaussian_curve(200.0, 0.0, 0).sigma_profile(3).is_err());
    }

    #[test]
    fn uniform_profile_is_seeded_and_bounded() {
        let a = NoiseSpec::uniform(25.0, 3).sigma_profile(200).unwrap();
        assert_eq!(a, NoiseSpec::uniform(25.0, 3).sigma_profile(200).unwrap());
        assert_ne!(a, NoiseSpec::uniform(25.0, 4).sigma_profile(200).unwrap());
        assert!(a.iter().all(|&s| s > 0.0 && s <= 25.0));
        let mean = a.iter().sum::<f64>() / 200.0;
        assert!((mean - 12.5).abs() < 2.0);
    }

    #[test]
    fn gaussian_curve_energy_identity() {
        for (beta, eta, bands) in [(200.0, 30.0, 191), (50.0, 10.0, 31), (1.0, 1.0, 2), (7.5, 3.0, 64)] {
            let s = NoiseSpec::gaussian_curve(beta, eta, 0).sigma_profile(bands).unwrap();
            let energy: f64 = s.iter().map(|v| v * v).sum();
            assert!((energy / (beta * beta) - 1.0).abs() < 1e-9, "({beta}, {eta}, {bands})");
        }
    }

    #[test]
    fn gaussian_curve_peak_and_symmetry() {
        let bands = 191;
        let s = NoiseSpec::gaussian_curve(200.0, 30.0, 0).sigma_profile(bands).unwrap();
        // Entry i is band n = i + 1; the curve is centred at n = B / 2 = 95.5.
        let peak = s.iter().cloned().fold(f64::MIN, f64::max);
        let n_peak = (bands as f64 / 2.0).round() as usize;
        assert!((s[n_peak - 1] - peak).abs() <= 1e-9 * peak);
        for n in 1..bands {
            let mirror = bands - n;
            assert!((s[n - 1] - s[mirror - 1]).abs() <= 1e-9 * peak);
        }
        // Non-increasing away from the centre.
        for n in n_peak..bands {
            assert!(s[n] <= s[n - 1] + 1e-15);
        }
    }

    #[test]
    fn vanishing_noise_leaves_cube_unchanged() {
        let cube = HsiCube::from_fn(8, 8, 3, |x, y, b| ((x + y + b) % 5) as f64 / 4.0);
        let noisy = add_noise(&cube, &NoiseSpec::fixed(1e-12, 1)).unwrap();
        for (a, b) in noisy.data().iter().zip(cube.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_unnormalized_cube() {
        let cube = HsiCube::from_fn(4, 4, 2, |x, _, _| x as f64 * 100.0);
        assert!(matches!(
            add_noise(&cube, &NoiseSpec::fixed(25.0, 1)),
            Err(HsidError::NotNormalized { .. })
        ));
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let cube = HsiCube::zeros(16, 16, 4);
        let a = add_noise(&cube, &NoiseSpec::fixed(25.0, 9)).unwrap();
        assert_eq!(a, add_noise(&cube, &NoiseSpec::fixed(25.0, 9)).unwrap());
        assert_ne!(a, add_noise(&cube, &NoiseSpec::fixed(25.0, 10)).unwrap());
    }

    #[test]
    fn band_substreams_do_not_depend_on_band_count() {
        let small = add_noise(&HsiCube::zeros(8, 8, 2), &NoiseSpec::fixed(25.0, 5)).unwrap();
        let large = add_noise(&HsiCube::zeros(8, 8, 6), &NoiseSpec::fixed(25.0, 5)).unwrap();
        assert_eq!(small.band(1), large.band(1));
    }

    #[test]
    fn empirical_statistics_match_requested_sigma() {
        let cube = HsiCube::zeros(1000, 1000, 2);
        let noisy = add_noise(&cube, &NoiseSpec::fixed(25.0, 42)).unwrap();
        let want = 25.0 / 255.0;
        for b in 0..2 {
            let (mean, std) = mean_std(noisy.band(b));
            assert!((std / want - 1.0).abs() < 0.02, "band {b}: std {std}");
            assert!(mean.abs() < 3.0 * want / 1000.0, "band {b}: mean {mean}");
        }
        let (x, y) = (noisy.band(0), noisy.band(1));
        let (mx, sx) = mean_std(x);
        let (my, sy) = mean_std(y);
        let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() as f64 - 1.0);
        assert!((cov / (sx * sy)).abs() < 0.01);
    }

    #[test]
    fn gaussian_curve_bands_follow_profile() {
        let spec = NoiseSpec::gaussian_curve(200.0, 3.0, 17);
        let cube = HsiCube::zeros(300, 300, 8);
        let noisy = add_noise(&cube, &spec).unwrap();
        let sigmas = spec.sigma_profile(8).unwrap();
        for (b, s) in sigmas.iter().enumerate() {
            let (_, std) = mean_std(noisy.band(b));
            assert!((std / (s / 255.0) - 1.0).abs() < 0.02);
        }
    }
}

//! Quality indexes: per-band PSNR and SSIM, their band means, and the mean
//! spectral angle.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use crate::cube::HsiCube;
use crate::error::{HsidError, Result};

/// PSNR returned when the two bands are identical.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 1.0;

fn check_lengths(a: &[f64], b: &[f64], context: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(HsidError::shape(context, "length", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(HsidError::InvalidArgument(format!("{context}: empty input")));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`] when MSE is zero.
pub fn psnr(reference: &[f64], test: &[f64], peak: f64) -> Result<f64> {
    check_lengths(reference, test, "psnr")?;
    if !(peak > 0.0) {
        return Err(HsidError::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    let sse: f64 = reference.iter().zip(test).map(|(r, t)| (r - t) * (r - t)).sum();
    let mse = sse / reference.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over every fully contained 11x11 window.
fn filter_valid(img: &[f64], width: usize, height: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let line = &img[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = g.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(w, v)| w * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(i, w)| w * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all valid 11x11 Gaussian windows
/// (sigma 1.5, K1 0.01, K2 0.03, dynamic range 1).
pub fn ssim(reference: &[f64], test: &[f64], width: usize, height: usize) -> Result<f64> {
    check_lengths(reference, test, "ssim")?;
    if reference.len() != width * height {
        return Err(HsidError::shape("ssim", "length", width * height, reference.len()));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(HsidError::InvalidArgument(format!(
            "ssim needs bands of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {width}x{height}"
        )));
    }
    let g = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_x = filter_valid(reference, width, height, &g);
    let mu_y = filter_valid(test, width, height, &g);
    let xx = filter_valid(&prod(reference, reference), width, height, &g);
    let yy = filter_valid(&prod(test, test), width, height, &g);
    let xy = filter_valid(&prod(reference, test), width, height, &g);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            // Identical windows give num == den bit for bit.
            if num == den {
                1.0
            } else {
                num / den
            }
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean spectral angle in degrees together with the number of pixels skipped
/// because either spectrum had zero norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralAngle {
    pub degrees: f64,
    pub skipped: usize,
}

pub fn msa(reference: &HsiCube, test: &HsiCube) -> Result<SpectralAngle> {
    reference.check_same_dims(test, "msa")?;
    if reference.bands() < 2 {
        return Err(HsidError::InvalidArgument(format!(
            "spectral angle needs at least 2 bands, got {}",
            reference.bands()
        )));
    }
    let plane = reference.plane();
    let bands = reference.bands();
    let (mut sum, mut counted, mut skipped) = (0.0, 0usize, 0usize);
    let (mut u, mut v) = (vec![0.0; bands], vec![0.0; bands]);
    for p in 0..plane {
        for b in 0..bands {
            u[b] = reference.data()[b * plane + p];
            v[b] = test.data()[b * plane + p];
        }
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            skipped += 1;
            continue;
        }
        // 2 atan2(|u' - v'|, |u' + v'|) on unit vectors equals the clamped
        // arccos of the cosine but stays accurate near 0 and 180 degrees.
        let (mut diff, mut plus) = (0.0, 0.0);
        for b in 0..bands {
            let (a, c) = (u[b] / nu, v[b] / nv);
            diff += (a - c) * (a - c);
            plus += (a + c) * (a + c);
        }
        sum += (2.0 * diff.sqrt().atan2(plus.sqrt())).to_degrees();
        counted += 1;
    }
    if skipped > 0 {
        warn!("spectral angle skipped {skipped} zero-norm pixel(s)");
    }
    if counted == 0 {
        return Err(HsidError::InvalidArgument("every pixel has a zero-norm spectrum".into()));
    }
    Ok(SpectralAngle { degrees: sum / counted as f64, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub mpsnr: f64,
    pub mssim: f64,
    /// `None` for single-band cubes, where the spectral angle is undefined.
    pub msa: Option<f64>,
    pub msa_skipped: usize,
    pub per_band_psnr: Vec<f64>,
    pub per_band_ssim: Vec<f64>,
}

pub fn report(reference: &HsiCube, test: &HsiCube) -> Result<QualityReport> {
    reference.check_same_dims(test, "report")?;
    let (w, h) = (reference.width(), reference.height());
    let per_band: Vec<(f64, f64)> = (0..reference.bands())
        .into_par_iter()
        .map(|b| {
            let (r, t) = (reference.band(b), test.band(b));
            Ok((psnr(r, t, 1.0)?, ssim(r, t, w, h)?))
        })
        .collect::<Result<_>>()?;
    let (per_band_psnr, per_band_ssim): (Vec<f64>, Vec<f64>) = per_band.into_iter().unzip();
    let n = per_band_psnr.len() as f64;
    let (msa, msa_skipped) = if reference.bands() >= 2 {
        let a = msa(reference, test)?;
        (Some(a.degrees), a.skipped)
    } else {
        (None, 0)
    };
    Ok(QualityReport {
        mpsnr: per_band_psnr.iter().sum::<f64>() / n,
        mssim: per_band_ssim.iter().sum::<f64>() / n,
        msa,
        msa_skipped,
        per_band_psnr,
        per_band_ssim,
    })
}

impl QualityReport {
    /// `band,psnr_db,ssim` rows followed by `summary,<mpsnr>,<mssim>,<msa|NA>`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("band,psnr_db,ssim\n");
        for (b, (p, q)) in self.per_band_psnr.iter().zip(&self.per_band_ssim).enumerate() {
            let _ = writeln!(s, "{b},{p},{q}");
        }
        let msa = self.msa.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let _ = writeln!(s, "summary,{},{},{msa}", self.mpsnr, self.mssim);
        s
    }
}

pub fn emit_csv(report: &QualityReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report.to_csv()).map_err(|e| HsidError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_band(seed: u64, n: usize) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random::<f64>()).collect()
    }

    // Direct per-window statistics with a 2-D Gaussian kernel, no separability.
    fn ssim_oracle(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
        let mut k = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                s += *v;
            }
        }
        let (c1, c2) = (0.0001, 0.0009);
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let p = (oy + i) * w + ox + j;
                        mx += k[i][j] / s * x[p];
                        my += k[i][j] / s * y[p];
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let p = (oy + i) * w + ox + j;
                        let wt = k[i][j] / s;
                        vx += wt * (x[p] - mx).powi(2);
                        vy += wt * (y[p] - my).powi(2);
                        cxy += wt * (x[p] - mx) * (y[p] - my);
                    }
                }
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random_band(1, 256);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b[..10], 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_matches_two_pass_oracle() {
        let a = random_band(2, 256);
        let b = random_band(3, 256);
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mse = diffs.iter().map(|d| d * d).sum::<f64>() / 256.0;
        let want = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn ssim_identity_symmetry_and_oracle() {
        let a = random_band(4, 256);
        let b = random_band(5, 256);
        assert_eq!(ssim(&a, &a, 16, 16).unwrap(), 1.0);
        let ab = ssim(&a, &b, 16, 16).unwrap();
        assert!((ab - ssim(&b, &a, 16, 16).unwrap()).abs() < 1e-12);
        assert!((ab - ssim_oracle(&a, &b, 16, 16)).abs() < 1e-9);
        assert!(ssim(&a[..100], &b[..100], 10, 10).is_err());
    }

    #[test]
    fn ssim_constant_offset_is_luminance_only() {
        let a = vec![0.3; 20 * 20];
        let b = vec![0.8; 20 * 20];
        let got = ssim(&a, &b, 20, 20).unwrap();
        let c1 = 0.0001;
        let want = (2.0 * 0.3 * 0.8 + c1) / (0.09 + 0.64 + c1);
        assert!((got - want).abs() < 1e-9);
        assert!((got - ssim_oracle(&a, &b, 20, 20)).abs() < 1e-9);
        assert!(got < 1.0);
    }

    #[test]
    fn msa_cases() {
        let r = HsiCube::from_fn(4, 4, 2, |_, _, b| if b == 0 { 1.0 } else { 0.0 });
        let t = HsiCube::from_fn(4, 4, 2, |_, _, b| if b == 1 { 1.0 } else { 0.0 });
        assert!((msa(&r, &t).unwrap().degrees - 90.0).abs() < 1e-12);
        assert_eq!(msa(&r, &r).unwrap().degrees, 0.0);
        let c = HsiCube::from_fn(5, 3, 4, |x, y, b| 0.1 + (x * 3 + y + b * 7) as f64 * 0.01);
        let mut c2 = c.clone();
        c2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        assert!(msa(&c, &c2).unwrap().degrees < 1e-9);
        assert!(msa(&HsiCube::zeros(2, 2, 1), &HsiCube::zeros(2, 2, 1)).is_err());
    }

    #[test]
    fn msa_matches_arccos_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let a = HsiCube::from_fn(16, 16, 6, |_, _, _| r.random::<f64>());
        let b = HsiCube::from_fn(16, 16, 6, |_, _, _| r.random::<f64>());
        let mut total = 0.0;
        for y in 0..16 {
            for x in 0..16 {
                let (s, t) = (a.spectrum(x, y), b.spectrum(x, y));
                let dot: f64 = s.iter().zip(&t).map(|(p, q)| p * q).sum();
                let ns: f64 = s.iter().map(|p| p * p).sum::<f64>().sqrt();
                let nt: f64 = t.iter().map(|q| q * q).sum::<f64>().sqrt();
                total += (dot / (ns * nt)).clamp(-1.0, 1.0).acos() * 180.0 / std::f64::consts::PI;
            }
        }
        assert!((msa(&a, &b).unwrap().degrees - total / 256.0).abs() < 1e-9);
    }

    #[test]
    fn msa_skips_zero_spectra() {
        let r = HsiCube::from_fn(2, 1, 2, |x, _, _| x as f64);
        let a = msa(&r, &r).unwrap();
        assert_eq!(a.skipped, 1);
        assert_eq!(a.degrees, 0.0);
    }

    #[test]
    fn report_self_and_csv() {
        let c = HsiCube::from_fn(12, 12, 3, |x, y, b| ((x * y + b) % 7) as f64 / 7.0 + 0.05);
        let r = report(&c, &c).unwrap();
        assert_eq!(r.mpsnr, PSNR_CAP_DB);
        assert_eq!(r.mssim, 1.0);
        assert_eq!(r.msa, Some(0.0));
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "band,psnr_db,ssim");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "summary,100,1,0");
    }

    #[test]
    fn single_band_report_flags_msa() {
        let c = HsiCube::from_fn(11, 11, 1, |x, y, _| (x + y) as f64 / 20.0);
        let r = report(&c, &c).unwrap();
        assert_eq!(r.msa, None);
        assert!(r.to_csv().ends_with("summary,100,1,NA\n"));
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        use crate::noise::{add_noise, NoiseSpec};
        let clean = HsiCube::from_fn(32, 32, 1, |x, y, _| 0.2 + 0.6 * ((x + y) % 9) as f64 / 8.0);
        let mean_psnr = |sigma: f64| {
            (0..10)
                .map(|t| {
                    let n = add_noise(&clean, &NoiseSpec::fixed(sigma, t)).unwrap();
                    psnr(clean.band(0), n.band(0), 1.0).unwrap()
                })
                .sum::<f64>()
                / 10.0
        };
        let (a, b, c) = (mean_psnr(5.0), mean_psnr(25.0), mean_psnr(50.0));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn msa_positive_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = HsiCube::from_fn(4, 4, 5, |_, _, _| r.random::<f64>() + 0.01);
            let b = HsiCube::from_fn(4, 4, 5, |_, _, _| r.random::<f64>() + 0.01);
            let mut bc = b.clone();
            bc.data_mut().iter_mut().for_each(|v| *v *= c);
            let d = (msa(&a, &b).unwrap().degrees - msa(&a, &bc).unwrap().degrees).abs();
            prop_assert!(d < 1e-9);
        }

        #[test]
        fn ssim_shift_lowers_score(seed in any::<u64>()) {
            let a = random_band(seed, 256);
            let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
            prop_assert!(ssim(&a, &b, 16, 16).unwrap() < 1.0);
        }
    }
}

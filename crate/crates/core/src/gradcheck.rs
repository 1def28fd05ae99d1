//! Central finite differences, used as the independent oracle for every
//! hand-written backward pass, and the whole-network gradient gate.

use log::debug;
use rand::seq::index;
use rand::Rng;

use crate::error::Result;
use crate::model::{backward, forward, init_params, ArchitectureSpec, ModelParams};
use crate::rng;
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`], so components whose true
/// gradient is zero are judged on absolute error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// Central-difference gradient of `f` at `point`, one component at a time.
pub fn finite_diff_grad<F>(f: F, point: &Tensor<f64>, step: f64) -> Tensor<f64>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = point.clone();
    let mut grad = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let plus = f(&probe);
        probe.data_mut()[i] = original - step;
        let minus = f(&probe);
        probe.data_mut()[i] = original;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// `|a - n| / max(|a|, |n|, floor)` for a single component.
pub fn component_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Worst [`component_relative_error`] over two equally shaped tensors.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| component_relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Settings for [`network_gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub spec: ArchitectureSpec,
    /// Side of the square input patch.
    pub patch: usize,
    pub step: f64,
    /// Components probed per tensor; tensors at most this large are checked in full.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Negative control: perturb the analytic gradient of one tensor so the
    /// gate must fail.
    pub corrupt_backward: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            spec: ArchitectureSpec::reduced(),
            patch: 8,
            step: 1e-4,
            samples_per_tensor: 96,
            seed: 0,
            corrupt_backward: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub worst: f64,
    pub checked: usize,
    /// Components abandoned because every step size moved a ReLU across its kink.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorReport>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.worst).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error() < tolerance && self.checked() > 0
    }
}

/// Loss `0.5 * ||phi - target||^2` plus the ReLU on/off pattern it was evaluated on.
fn loss_and_mask(
    y: &Tensor<f64>,
    ys: &Tensor<f64>,
    target: &Tensor<f64>,
    params: &ModelParams<f64>,
    spec: &ArchitectureSpec,
) -> Result<(f64, Vec<bool>)> {
    let (phi, cache) = forward(y, ys, params, spec)?;
    let loss = 0.5 * phi.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
    let mask = cache.relu_inputs().flat_map(|t| t.data().iter().map(|&v| v > 0.0)).collect();
    Ok((loss, mask))
}

/// Compares the analytic gradient of `0.5 * ||Net(y) - target||^2` with central
/// differences, for a seeded random subset of every parameter tensor.
///
/// Within a fixed ReLU pattern the loss is quadratic in any single weight, so
/// the central difference is exact up to rounding. Components whose probe
/// flips a ReLU are retried with smaller steps and skipped if the flip persists.
pub fn network_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let spec = &opts.spec;
    spec.validate()?;
    let p = opts.patch;
    let mut r = rng::stream(opts.seed, rng::streams::SIGMA_DRAWS + 3);
    let mut params = init_params::<f64>(spec, opts.seed);
    // Random biases keep units away from the all-off regime of zero biases.
    for t in params.tensors_mut().into_iter().filter(|t| t.rank() == 1) {
        t.data_mut().iter_mut().for_each(|b| *b = r.random_range(-0.1..0.1));
    }
    let y = Tensor::from_fn(&[1, p, p], |_| r.random::<f64>());
    let ys = Tensor::from_fn(&[spec.adjacent_bands, p, p], |_| r.random::<f64>());
    let target = Tensor::from_fn(&[1, p, p], |_| r.random_range(-1.0..1.0));

    let (phi, cache) = forward(&y, &ys, &params, spec)?;
    let grad_phi = Tensor::from_fn(phi.shape(), |i| phi.data()[i] - target.data()[i]);
    let mut analytic = backward(&cache, &params, &grad_phi)?;
    if opts.corrupt_backward {
        let victim = analytic.tensors_mut().into_iter().nth(2 * spec.scales.len() + 4).expect("trunk tensor");
        victim.data_mut().iter_mut().for_each(|g| *g = *g * 1.05 + 1e-3);
    }
    let (_, base_mask) = loss_and_mask(&y, &ys, &target, &params, spec)?;

    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Tensor<f64>> = analytic.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic[ti].len();
        let picks: Vec<usize> = if len <= opts.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut v = index::sample(&mut r, len, opts.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut report = TensorReport { name, worst: 0.0, checked: 0, skipped: 0 };
        for i in picks {
            let original = params.tensors_mut()[ti].data()[i];
            let mut numeric = None;
            let mut h = opts.step;
            for _ in 0..4 {
                params.tensors_mut()[ti].data_mut()[i] = original + h;
                let (plus, m_plus) = loss_and_mask(&y, &ys, &target, &params, spec)?;
                params.tensors_mut()[ti].data_mut()[i] = original - h;
                let (minus, m_minus) = loss_and_mask(&y, &ys, &target, &params, spec)?;
                params.tensors_mut()[ti].data_mut()[i] = original;
                if m_plus == base_mask && m_minus == base_mask {
                    numeric = Some((plus - minus) / (2.0 * h));
                    break;
                }
                h /= 10.0;
            }
            match numeric {
                Some(n) => {
                    report.worst = report.worst.max(component_relative_error(analytic[ti].data()[i], n));
                    report.checked += 1;
                }
                None => report.skipped += 1,
            }
        }
        debug!("{}: worst {:.3e} over {} components", report.name, report.worst, report.checked);
        reports.push(report);
    }
    Ok(GradcheckReport { tensors: reports })
}

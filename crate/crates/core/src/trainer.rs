//! Residual MSE objective, Adam, and the epoch/batch training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::save_checkpoint;
use crate::error::{HsidError, Result};
use crate::model::{backward, forward, init_params, ArchitectureSpec, ModelParams, ParamGradients};
use crate::pipeline::PatchSample;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Multiplies the learning rate by `factor` every `every` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub every: u64,
    pub factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Off by default: the learning rate stays at `alpha`.
    pub decay: Option<StepDecay>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { alpha: 0.01, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, decay: None }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(HsidError::InvalidArgument(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.alpha > 0.0 && self.epsilon > 0.0) {
            return Err(HsidError::InvalidArgument("alpha and epsilon must be positive".into()));
        }
        if let Some(d) = self.decay {
            if d.every == 0 || !(d.factor > 0.0) {
                return Err(HsidError::InvalidArgument("decay needs every >= 1 and factor > 0".into()));
            }
        }
        Ok(())
    }

    /// Learning rate used for step `t` (1-based).
    pub fn learning_rate(&self, t: u64) -> f64 {
        match self.decay {
            None => self.alpha,
            Some(d) => self.alpha * d.factor.powi(((t - 1) / d.every) as i32),
        }
    }
}

/// Adam moment estimates plus the number of steps taken so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(spec: &ArchitectureSpec) -> Self {
        AdamState { m: ModelParams::zeros(spec), v: ModelParams::zeros(spec), step: 0 }
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState { m: self.m.cast(), v: self.v.cast(), step: self.step }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ParamGradients<T>,
    state: &mut AdamState<T>,
    config: &OptimizerConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let b1 = T::from_f64_lossy(config.beta1);
    let b2 = T::from_f64_lossy(config.beta2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - config.beta1.powf(t as f64));
    let c2 = T::from_f64_lossy(1.0 - config.beta2.powf(t as f64));
    let lr = T::from_f64_lossy(config.learning_rate(t));
    let eps = T::from_f64_lossy(config.epsilon);

    let g_all = grads.named_tensors();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    let p_all = params.tensors_mut();
    if g_all.len() != p_all.len() || m_all.len() != p_all.len() || v_all.len() != p_all.len() {
        return Err(HsidError::shape("adam_step", "tensor count", p_all.len(), g_all.len()));
    }
    for (((p, (name, g)), m), v) in p_all.into_iter().zip(g_all).zip(m_all).zip(v_all) {
        g.expect_shape(p.shape(), &name)?;
        m.expect_shape(p.shape(), &name)?;
        v.expect_shape(p.shape(), &name)?;
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-sample objective `0.5 * ||Net(y) - (x - y)||^2` and its parameter gradient
/// scaled by `scale`.
fn sample_loss<T: Scalar>(
    sample: &PatchSample<T>,
    params: &ModelParams<T>,
    spec: &ArchitectureSpec,
    scale: T,
) -> Result<(f64, ParamGradients<T>)> {
    let target = sample.residual_target()?;
    let (phi, cache) = forward(&sample.y_spatial, &sample.y_spectral, params, spec)?;
    let diff: Vec<T> = phi.data().iter().zip(target.data()).map(|(&p, &t)| p - t).collect();
    let loss = 0.5 * diff.iter().map(|d| d.as_f64() * d.as_f64()).sum::<f64>();
    let grad_phi = Tensor::zeros(phi.shape()).with_data(diff.into_iter().map(|d| d * scale).collect())?;
    Ok((loss, backward(&cache, params, &grad_phi)?))
}

/// Mini-batch loss `(1 / 2T) * sum_i ||Net(y_i) - (x_i - y_i)||^2` with `T` the
/// batch size, and its exact gradient.
///
/// Samples are evaluated in parallel groups but their gradients are summed in
/// sample order, so the result does not depend on the thread count.
pub fn residual_loss<T: Scalar>(
    batch: &[PatchSample<T>],
    params: &ModelParams<T>,
    spec: &ArchitectureSpec,
) -> Result<(f64, ParamGradients<T>)> {
    let refs: Vec<&PatchSample<T>> = batch.iter().collect();
    residual_loss_refs(&refs, params, spec)
}

fn residual_loss_refs<T: Scalar>(
    batch: &[&PatchSample<T>],
    params: &ModelParams<T>,
    spec: &ArchitectureSpec,
) -> Result<(f64, ParamGradients<T>)> {
    if batch.is_empty() {
        return Err(HsidError::InvalidArgument("empty batch".into()));
    }
    let n = batch.len();
    let scale = T::from_f64_lossy(1.0 / n as f64);
    let group = rayon::current_num_threads().max(1);
    let mut total = 0.0;
    let mut grads = ModelParams::zeros(spec);
    for chunk in batch.chunks(group) {
        let results: Vec<(f64, ParamGradients<T>)> = chunk
            .par_iter()
            .map(|s| sample_loss(s, params, spec, scale))
            .collect::<Result<_>>()?;
        for (loss, g) in results {
            total += loss;
            grads.accumulate(&g)?;
        }
    }
    Ok((total / n as f64, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub init_seed: u64,
    /// Stop once the optimizer has taken this many steps in total.
    pub max_iterations: Option<u64>,
    pub snapshot_every: Option<u64>,
    pub snapshot_dir: Option<PathBuf>,
    pub loss_trace_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            shuffle_seed: 0,
            init_seed: 0,
            max_iterations: None,
            snapshot_every: None,
            snapshot_dir: None,
            loss_trace_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HsidError::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.snapshot_every == Some(0) {
            return Err(HsidError::InvalidArgument("snapshot cadence must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,epoch,loss\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{}", r.iteration, r.epoch, r.loss);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| HsidError::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub state: AdamState<T>,
    pub trace: LossTrace,
}

/// Sample order for `epoch`, a pure function of the shuffle seed.
pub fn epoch_order(len: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut r = rng::stream(shuffle_seed, rng::streams::SHUFFLE_BASE + epoch as u64);
    order.shuffle(&mut r);
    order
}

pub fn batches_per_epoch(samples: usize, batch_size: usize) -> u64 {
    samples.div_ceil(batch_size) as u64
}

/// Trains from He-initialised parameters (seeded by `init_seed`).
pub fn train<T: Scalar>(
    dataset: &[PatchSample<T>],
    spec: &ArchitectureSpec,
    config: &TrainConfig,
    optimizer: &OptimizerConfig,
) -> Result<TrainOutcome<T>> {
    spec.validate()?;
    let params = init_params(spec, config.init_seed);
    train_from(dataset, spec, params, AdamState::new(spec), config, optimizer)
}

/// Continues training from `params` and `state`.
///
/// The position in the epoch/batch schedule is recovered from `state.step`, so
/// resuming from a snapshot reproduces the uninterrupted trajectory exactly.
pub fn train_from<T: Scalar>(
    dataset: &[PatchSample<T>],
    spec: &ArchitectureSpec,
    mut params: ModelParams<T>,
    mut state: AdamState<T>,
    config: &TrainConfig,
    optimizer: &OptimizerConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    optimizer.validate()?;
    params.check_spec(spec)?;
    let mut trace = LossTrace::default();
    if config.epochs == 0 {
        return Ok(TrainOutcome { params, state, trace });
    }
    if dataset.is_empty() {
        return Err(HsidError::InvalidArgument("training set is empty".into()));
    }
    let per_epoch = batches_per_epoch(dataset.len(), config.batch_size);
    let mut total = per_epoch.saturating_mul(config.epochs as u64);
    if let Some(cap) = config.max_iterations {
        total = total.min(cap);
    }
    info!(
        "training on {} samples, {} batches per epoch, {} steps",
        dataset.len(),
        per_epoch,
        total.saturating_sub(state.step)
    );
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    while state.step < total {
        let epoch = (state.step / per_epoch) as usize;
        let batch_idx = (state.step % per_epoch) as usize;
        if epoch != order_epoch {
            order = epoch_order(dataset.len(), config.shuffle_seed, epoch);
            order_epoch = epoch;
        }
        let lo = batch_idx * config.batch_size;
        let hi = (lo + config.batch_size).min(dataset.len());
        let batch: Vec<&PatchSample<T>> = order[lo..hi].iter().map(|&i| &dataset[i]).collect();
        let iteration = state.step + 1;
        let (loss, grads) = residual_loss_refs(&batch, &params, spec)?;
        if !loss.is_finite() {
            return Err(HsidError::NonFiniteLoss { iteration });
        }
        if let Some(tensor) = grads.first_non_finite() {
            return Err(HsidError::NonFiniteGradient { iteration, tensor });
        }
        adam_step(&mut params, &grads, &mut state, optimizer)?;
        debug!("iteration {iteration} epoch {epoch} loss {loss}");
        trace.records.push(LossRecord { iteration, epoch, loss });
        if let (Some(every), Some(dir)) = (config.snapshot_every, &config.snapshot_dir) {
            if iteration % every == 0 {
                let path = dir.join(format!("snapshot_{iteration:08}.hsck"));
                save_checkpoint(&path, spec, &params, Some(&state))?;
                if let Some(p) = &config.loss_trace_path {
                    trace.write_csv(p)?;
                }
            }
        }
    }
    if let Some(p) = &config.loss_trace_path {
        trace.write_csv(p)?;
    }
    Ok(TrainOutcome { params, state, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::component_relative_error;
    use crate::model::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            adjacent_bands: 2,
            branch_channels: 2,
            scales: vec![1, 3],
            trunk_depth: 3,
            trunk_channels: 3,
            tap_layers: vec![1, 3],
            head_kernel: 3,
            branch_relu: true,
        }
    }

    fn random_batch(spec: &ArchitectureSpec, n: usize, side: usize, seed: u64) -> Vec<PatchSample<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut t = |c: usize| Tensor::from_fn(&[c, side, side], |_| r.random::<f64>());
                PatchSample {
                    y_spatial: t(1),
                    y_spectral: t(spec.adjacent_bands),
                    label_clean: t(1),
                    band: i,
                    x: 0,
                    y: 0,
                }
            })
            .collect()
    }

    #[test]
    fn zero_params_clean_batch_has_zero_loss() {
        let spec = tiny_spec();
        let mut batch = random_batch(&spec, 3, 6, 1);
        for s in &mut batch {
            s.label_clean = s.y_spatial.clone();
        }
        let (loss, _) = residual_loss(&batch, &ModelParams::zeros(&spec), &spec).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn zero_params_constant_residual() {
        let spec = tiny_spec();
        let c = 0.3;
        let side = 6;
        let mut batch = random_batch(&spec, 4, side, 2);
        for s in &mut batch {
            s.label_clean = s.y_spatial.map(|v| v + c);
        }
        let (loss, _) = residual_loss(&batch, &ModelParams::zeros(&spec), &spec).unwrap();
        // Per sample 0.5 * sum over the patch of c^2, averaged over T samples.
        let want = 0.5 * c * c * (side * side) as f64;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_keeps_loss() {
        let spec = tiny_spec();
        let params = init_params::<f64>(&spec, 3);
        let batch = random_batch(&spec, 3, 6, 3);
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let (a, ga) = residual_loss(&batch, &params, &spec).unwrap();
        let (b, gb) = residual_loss(&doubled, &params, &spec).unwrap();
        assert!((a - b).abs() < 1e-12 * a.max(1.0));
        for ((_, x), (_, y)) in ga.named_tensors().iter().zip(gb.named_tensors()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() < 1e-12 * p.abs().max(1.0));
            }
        }
        assert!(residual_loss::<f64>(&[], &params, &spec).is_err());
    }

    fn loss_and_masks(batch: &[PatchSample<f64>], params: &ModelParams<f64>, spec: &ArchitectureSpec) -> (f64, Vec<bool>) {
        let loss = residual_loss(batch, params, spec).unwrap().0;
        let mut masks = Vec::new();
        for s in batch {
            let (_, cache) = forward(&s.y_spatial, &s.y_spectral, params, spec).unwrap();
            masks.extend(cache.relu_inputs().flat_map(|t| t.data().iter().map(|&v| v > 0.0)));
        }
        (loss, masks)
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // Every parameter of a small network. With the ReLU pattern held fixed
        // the loss is quadratic in each single weight, so a central difference
        // with a moderate step is exact up to rounding; probes that flip a ReLU
        // are retried with a smaller step.
        let spec = tiny_spec();
        let mut params = init_params::<f64>(&spec, 4);
        let mut r = ChaCha8Rng::seed_from_u64(40);
        for t in params.tensors_mut().into_iter().filter(|t| t.rank() == 1) {
            t.data_mut().iter_mut().for_each(|b| *b = r.random_range(-0.1..0.1));
        }
        let batch = random_batch(&spec, 2, 6, 5);
        let (_, grads) = residual_loss(&batch, &params, &spec).unwrap();
        let (_, base_mask) = loss_and_masks(&batch, &params, &spec);
        let analytic: Vec<Tensor<f64>> = grads.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
        for (ti, g) in analytic.iter().enumerate() {
            for i in 0..g.len() {
                let original = params.tensors_mut()[ti].data()[i];
                let mut h = 1e-3;
                let mut numeric = None;
                for _ in 0..4 {
                    params.tensors_mut()[ti].data_mut()[i] = original + h;
                    let (plus, mp) = loss_and_masks(&batch, &params, &spec);
                    params.tensors_mut()[ti].data_mut()[i] = original - h;
                    let (minus, mm) = loss_and_masks(&batch, &params, &spec);
                    params.tensors_mut()[ti].data_mut()[i] = original;
                    if mp == base_mask && mm == base_mask {
                        numeric = Some((plus - minus) / (2.0 * h));
                        break;
                    }
                    h /= 10.0;
                }
                match numeric {
                    Some(n) => {
                        worst = worst.max(component_relative_error(g.data()[i], n));
                        checked += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
        assert!(skipped * 50 < checked, "{skipped} skipped of {checked}");
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let spec = tiny_spec();
        let mut p = init_params::<f64>(&spec, 1);
        let before = p.clone();
        let mut s = AdamState::new(&spec);
        adam_step(&mut p, &ModelParams::zeros(&spec), &mut s, &OptimizerConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_alpha() {
        let spec = tiny_spec();
        let cfg = OptimizerConfig::default();
        for g in [1e-3, 0.5, -7.0] {
            let mut p = ModelParams::<f64>::zeros(&spec);
            let mut grads = ModelParams::<f64>::zeros(&spec);
            grads.tensors_mut().into_iter().for_each(|t| t.fill(g));
            let mut s = AdamState::new(&spec);
            adam_step(&mut p, &grads, &mut s, &cfg).unwrap();
            for (_, t) in p.named_tensors() {
                // m_hat = g and v_hat = g^2, so the step is alpha |g| / (|g| + eps).
                let want = cfg.alpha * g.abs() / (g.abs() + cfg.epsilon);
                for &v in t.data() {
                    assert!((v.abs() - want).abs() <= 1e-12 * cfg.alpha);
                    assert!((v.abs() - cfg.alpha).abs() <= 1.5e-5 * cfg.alpha);
                    assert_eq!(v.signum(), -g.signum());
                }
            }
        }
    }

    #[test]
    fn adam_steps_are_bounded_and_deterministic() {
        let spec = tiny_spec();
        let cfg = OptimizerConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut p = init_params::<f64>(&spec, 2);
        let mut s = AdamState::new(&spec);
        let mut p2 = p.clone();
        let mut s2 = s.clone();
        for t in 1..=5u64 {
            let mut g = ModelParams::<f64>::zeros(&spec);
            for t in g.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-3.0..3.0));
            }
            let before = p.clone();
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
            adam_step(&mut p2, &g, &mut s2, &cfg).unwrap();
            // m_hat and v_hat are weighted averages of g_i and g_i^2 with weights
            // w_i and u_i; by Cauchy-Schwarz |m_hat| / sqrt(v_hat) <= sqrt(sum w_i^2 / u_i).
            let (b1, b2) = (cfg.beta1, cfg.beta2);
            let ratio: f64 = (1..=t)
                .map(|i| {
                    let w = (1.0 - b1) * b1.powi((t - i) as i32) / (1.0 - b1.powi(t as i32));
                    let u = (1.0 - b2) * b2.powi((t - i) as i32) / (1.0 - b2.powi(t as i32));
                    w * w / u
                })
                .sum();
            let bound = cfg.alpha * ratio.sqrt() * (1.0 + 1e-9);
            for ((_, a), (_, b)) in p.named_tensors().iter().zip(before.named_tensors()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() <= bound);
                }
            }
            assert!(s.v.named_tensors().iter().all(|(_, t)| t.data().iter().all(|&v| v >= 0.0)));
        }
        assert_eq!(p, p2);
        assert_eq!(s, s2);
    }

    #[test]
    fn steady_gradient_steps_never_exceed_alpha() {
        let spec = tiny_spec();
        let cfg = OptimizerConfig::default();
        let mut p = ModelParams::<f64>::zeros(&spec);
        let mut g = ModelParams::<f64>::zeros(&spec);
        g.tensors_mut().into_iter().for_each(|t| t.fill(0.25));
        let mut s = AdamState::new(&spec);
        for _ in 0..200 {
            let before = p.clone();
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
            let d = (p.head.bias.data()[0] - before.head.bias.data()[0]).abs();
            assert!(d <= cfg.alpha * (1.0 + 1e-9));
        }
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = OptimizerConfig { decay: Some(StepDecay { every: 10, factor: 0.5 }), ..Default::default() };
        assert_eq!(cfg.learning_rate(1), 0.01);
        assert_eq!(cfg.learning_rate(10), 0.01);
        assert_eq!(cfg.learning_rate(11), 0.005);
        assert_eq!(OptimizerConfig::default().learning_rate(1000), 0.01);
        assert!(OptimizerConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
    }

    fn quick_config() -> TrainConfig {
        TrainConfig { epochs: 3, batch_size: 3, shuffle_seed: 7, init_seed: 8, ..Default::default() }
    }

    #[test]
    fn training_is_deterministic() {
        let spec = tiny_spec();
        let data = random_batch(&spec, 7, 6, 11);
        let a = train(&data, &spec, &quick_config(), &OptimizerConfig::default()).unwrap();
        let b = train(&data, &spec, &quick_config(), &OptimizerConfig::default()).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace.records.len(), 9);
        assert_eq!(a.trace.records[8].epoch, 2);
    }

    #[test]
    fn zero_epochs_return_initialisation() {
        let spec = tiny_spec();
        let cfg = TrainConfig { epochs: 0, ..quick_config() };
        let out = train::<f64>(&[], &spec, &cfg, &OptimizerConfig::default()).unwrap();
        assert!(out.trace.records.is_empty());
        assert_eq!(out.params, init_params(&spec, cfg.init_seed));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let spec = tiny_spec();
        let data = random_batch(&spec, 7, 6, 12);
        let opt = OptimizerConfig::default();
        let full = train(&data, &spec, &quick_config(), &opt).unwrap();
        let first = train(&data, &spec, &TrainConfig { max_iterations: Some(4), ..quick_config() }, &opt).unwrap();
        let rest = train_from(&data, &spec, first.params, first.state, &quick_config(), &opt).unwrap();
        let joined: Vec<LossRecord> = first.trace.records.into_iter().chain(rest.trace.records).collect();
        assert_eq!(joined, full.trace.records);
        assert_eq!(rest.params, full.params);
    }

    #[test]
    fn nan_label_aborts_with_iteration() {
        let spec = tiny_spec();
        let mut data = random_batch(&spec, 4, 6, 13);
        data.iter_mut().for_each(|s| s.label_clean.data_mut()[0] = f64::NAN);
        let cfg = TrainConfig { epochs: 1, batch_size: 2, ..quick_config() };
        match train(&data, &spec, &cfg, &OptimizerConfig::default()) {
            Err(HsidError::NonFiniteLoss { iteration }) => assert_eq!(iteration, 1),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn shuffle_depends_on_epoch_and_seed() {
        let a = epoch_order(50, 1, 0);
        assert_ne!(a, epoch_order(50, 1, 1));
        assert_ne!(a, epoch_order(50, 2, 0));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(batches_per_epoch(19100, 128), 150);
    }

    #[test]
    fn trace_csv_schema() {
        let t = LossTrace { records: vec![LossRecord { iteration: 1, epoch: 0, loss: 0.5 }] };
        assert_eq!(t.to_csv(), "iteration,epoch,loss\n1,0,0.5\n");
    }
}

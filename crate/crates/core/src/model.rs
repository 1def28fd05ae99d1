//! The spatial-spectral residual denoising network.
//!
//! Layout, for `K` adjacent bands and the default knobs:
//!
//! ```text
//! y_spatial [1,H,W]  --conv3/5/7 (20 each)--+
//!                                           +-- concat [120,H,W]
//! y_spectral [K,H,W] --conv3/5/7 (20 each)--+
//!   -> 9 x (conv3x3, 60 ch, ReLU)
//!   -> concat(post-ReLU outputs of layers 3, 5, 7, 9) [240,H,W]
//!   -> conv3x3 -> phi [1,H,W]         (no activation)
//! x_hat = y_spatial + phi
//! ```
//!
//! The spectral branch treats the `K` adjacent bands as input channels, so each
//! spectral kernel spans the full window depth and emits 2-D maps.

use crate::error::{HsidError, Result};
use crate::layers::{
    concat_channels, conv2d_backward_impl, conv2d_forward, relu_backward, relu_forward,
    residual_add, split_channels, ConvLayerParams,
};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const TRUNK_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    /// K: adjacent bands fed to the spectral branch (current band excluded).
    pub adjacent_bands: usize,
    pub branch_channels: usize,
    /// Kernel sizes of the multi-scale branches.
    pub scales: Vec<usize>,
    pub trunk_depth: usize,
    pub trunk_channels: usize,
    /// 1-based trunk layers whose post-ReLU outputs feed the head.
    pub tap_layers: Vec<usize>,
    pub head_kernel: usize,
    /// Apply ReLU to branch outputs before the fusion concat.
    pub branch_relu: bool,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        ArchitectureSpec {
            adjacent_bands: 24,
            branch_channels: 20,
            scales: vec![3, 5, 7],
            trunk_depth: 9,
            trunk_channels: 60,
            tap_layers: vec![3, 5, 7, 9],
            head_kernel: 3,
            branch_relu: true,
        }
    }
}

impl ArchitectureSpec {
    pub fn with_adjacent_bands(mut self, k: usize) -> Self {
        self.adjacent_bands = k;
        self
    }

    /// Reduced spec used by gradient checks and overfit runs: K = 4, all other
    /// knobs at their defaults.
    pub fn reduced() -> Self {
        Self::default().with_adjacent_bands(4)
    }

    /// Multi-scale unit on: kernels {3, 5, 7}; off: a single 3x3 kernel per branch.
    pub fn with_multi_scale(mut self, enabled: bool) -> Self {
        self.scales = if enabled { vec![3, 5, 7] } else { vec![3] };
        self
    }

    /// Multi-level unit on: taps {3, 5, 7, 9}; off: the head reads the last layer only.
    pub fn with_multi_level(mut self, enabled: bool) -> Self {
        self.tap_layers = if enabled {
            (1..=self.trunk_depth).filter(|l| l % 2 == 1 && *l >= 3).collect()
        } else {
            vec![self.trunk_depth]
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HsidError::InvalidArgument(msg));
        if self.adjacent_bands < 2 || self.adjacent_bands % 2 != 0 {
            return bad(format!("K must be even and >= 2, got {}", self.adjacent_bands));
        }
        if self.branch_channels == 0 || self.trunk_channels == 0 || self.trunk_depth == 0 {
            return bad("channel counts and trunk depth must be positive".into());
        }
        if self.scales.is_empty() || self.scales.iter().any(|&k| k % 2 == 0) {
            return bad(format!("branch kernel sizes must be odd and nonempty, got {:?}", self.scales));
        }
        if self.head_kernel % 2 == 0 {
            return bad(format!("head kernel must be odd, got {}", self.head_kernel));
        }
        if self.tap_layers.is_empty()
            || self.tap_layers.windows(2).any(|w| w[0] >= w[1])
            || self.tap_layers.iter().any(|&t| t == 0 || t > self.trunk_depth)
        {
            return bad(format!(
                "tap layers must be strictly increasing within 1..={}, got {:?}",
                self.trunk_depth, self.tap_layers
            ));
        }
        Ok(())
    }

    /// Channels of the fused branch map (`2 * |scales| * branch_channels`).
    pub fn fused_channels(&self) -> usize {
        2 * self.scales.len() * self.branch_channels
    }

    /// Channels of the multi-level concat feeding the head.
    pub fn tap_channels(&self) -> usize {
        self.tap_layers.len() * self.trunk_channels
    }

    /// Radius (pixels) of the region of the input that can affect one output pixel.
    pub fn receptive_radius(&self) -> usize {
        let widest = self.scales.iter().copied().max().unwrap_or(1);
        widest / 2 + self.trunk_depth * (TRUNK_KERNEL / 2) + self.head_kernel / 2
    }

    pub fn min_frame(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(1)
    }

    /// Total trainable scalars implied by the spec.
    pub fn param_count(&self) -> usize {
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let branches: usize = self
            .scales
            .iter()
            .map(|&k| conv(self.branch_channels, 1, k) + conv(self.branch_channels, self.adjacent_bands, k))
            .sum();
        let trunk = conv(self.trunk_channels, self.fused_channels(), TRUNK_KERNEL)
            + (self.trunk_depth - 1) * conv(self.trunk_channels, self.trunk_channels, TRUNK_KERNEL);
        branches + trunk + conv(1, self.tap_channels(), self.head_kernel)
    }
}

/// Every trainable tensor of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub spatial: Vec<ConvLayerParams<T>>,
    pub spectral: Vec<ConvLayerParams<T>>,
    pub trunk: Vec<ConvLayerParams<T>>,
    pub head: ConvLayerParams<T>,
}

/// Gradients share the parameter layout.
pub type ParamGradients<T> = ModelParams<T>;

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters: the network output is identically zero.
    pub fn zeros(spec: &ArchitectureSpec) -> Self {
        let b = spec.branch_channels;
        ModelParams {
            spatial: spec.scales.iter().map(|&k| ConvLayerParams::zeros(b, 1, k)).collect(),
            spectral: spec
                .scales
                .iter()
                .map(|&k| ConvLayerParams::zeros(b, spec.adjacent_bands, k))
                .collect(),
            trunk: (0..spec.trunk_depth)
                .map(|l| {
                    let cin = if l == 0 { spec.fused_channels() } else { spec.trunk_channels };
                    ConvLayerParams::zeros(spec.trunk_channels, cin, TRUNK_KERNEL)
                })
                .collect(),
            head: ConvLayerParams::zeros(1, spec.tap_channels(), spec.head_kernel),
        }
    }

    /// `(name, layer)` in canonical order: spatial, spectral, trunk, head.
    pub fn layers(&self) -> Vec<(String, &ConvLayerParams<T>)> {
        let mut out = Vec::new();
        for l in &self.spatial {
            out.push((format!("spatial_feature_{}", l.kernel_size()), l));
        }
        for l in &self.spectral {
            out.push((format!("spectral_feature_{}", l.kernel_size()), l));
        }
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("trunk_layer_{}", i + 1), l));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayerParams<T>> {
        self.spatial
            .iter_mut()
            .chain(self.spectral.iter_mut())
            .chain(self.trunk.iter_mut())
            .chain(std::iter::once(&mut self.head))
    }

    /// `(name, tensor)` pairs, weights before bias within each layer.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| [(format!("{name}.weight"), &l.weights), (format!("{name}.bias"), &l.bias)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.param_count()).sum()
    }

    /// Fails with a shape error naming the first layer that disagrees with `spec`.
    pub fn check_spec(&self, spec: &ArchitectureSpec) -> Result<()> {
        let want = ModelParams::<T>::zeros(spec);
        let (have, want) = (self.named_tensors(), want.named_tensors());
        if have.len() != want.len() {
            return Err(HsidError::shape("model parameters", "tensor count", want.len(), have.len()));
        }
        for ((name, h), (wname, w)) in have.iter().zip(&want) {
            if name != wname {
                return Err(HsidError::InvalidArgument(format!(
                    "parameter {name} found where {wname} was expected"
                )));
            }
            h.expect_shape(w.shape(), name)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |l: &ConvLayerParams<T>| ConvLayerParams {
            weights: l.weights.cast(),
            bias: l.bias.cast(),
        };
        ModelParams {
            spatial: self.spatial.iter().map(conv).collect(),
            spectral: self.spectral.iter().map(conv).collect(),
            trunk: self.trunk.iter().map(conv).collect(),
            head: conv(&self.head),
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &ModelParams<T>) -> Result<()> {
        let theirs = other.named_tensors();
        for (mine, (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(factor));
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named_tensors()
            .into_iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(n, _)| n)
    }
}

/// He-style initialisation: weights ~ N(0, 2 / (in_channels * k^2)), biases zero.
/// Draws come from one seeded stream in canonical layer order.
pub fn init_params<T: Scalar>(spec: &ArchitectureSpec, seed: u64) -> ModelParams<T> {
    let mut params = ModelParams::<T>::zeros(spec);
    let mut rng = rng::stream(seed, rng::streams::PARAM_INIT);
    for layer in params.layers_mut() {
        let fan_in = layer.in_channels() * layer.kernel_size() * layer.kernel_size();
        let std = (2.0 / fan_in as f64).sqrt();
        for w in layer.weights.data_mut() {
            *w = T::from_f64_lossy(std * rng::standard_normal(&mut rng));
        }
    }
    params
}

/// Intermediate activations recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    spec: ArchitectureSpec,
    height: usize,
    width: usize,
    y_spatial: Tensor<T>,
    y_spectral: Tensor<T>,
    /// Branch conv outputs before activation, spatial then spectral.
    branch_pre: Vec<Tensor<T>>,
    fused: Tensor<T>,
    trunk_pre: Vec<Tensor<T>>,
    trunk_post: Vec<Tensor<T>>,
    taps: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn fused(&self) -> &Tensor<T> {
        &self.fused
    }

    pub fn taps(&self) -> &Tensor<T> {
        &self.taps
    }

    /// Pre-activation of trunk layer `layer` (1-based).
    pub fn trunk_pre_activation(&self, layer: usize) -> &Tensor<T> {
        &self.trunk_pre[layer - 1]
    }

    /// Every tensor that passes through a ReLU, branch outputs first.
    pub fn relu_inputs(&self) -> impl Iterator<Item = &Tensor<T>> {
        let branches = if self.spec.branch_relu { &self.branch_pre[..] } else { &[] };
        branches.iter().chain(self.trunk_pre.iter())
    }
}

fn in_layer(layer: &str) -> impl Fn(HsidError) -> HsidError + '_ {
    move |e| match e {
        HsidError::ShapeMismatch { context, dimension, expected, actual } => HsidError::ShapeMismatch {
            context: format!("{layer} ({context})"),
            dimension,
            expected,
            actual,
        },
        other => other,
    }
}

fn check_inputs<T: Scalar>(
    y_spatial: &Tensor<T>,
    y_spectral: &Tensor<T>,
    spec: &ArchitectureSpec,
) -> Result<(usize, usize)> {
    spec.validate()?;
    let (c, h, w) = y_spatial.dims3("y_spatial")?;
    if c != 1 {
        return Err(HsidError::shape("y_spatial", "channels", 1, c));
    }
    y_spectral.expect_shape(&[spec.adjacent_bands, h, w], "y_spectral")?;
    let min = spec.min_frame();
    if h < min || w < min {
        return Err(HsidError::InvalidArgument(format!(
            "input frame {w}x{h} smaller than the widest kernel ({min})"
        )));
    }
    Ok((h, w))
}

fn run<T: Scalar>(
    y_spatial: &Tensor<T>,
    y_spectral: &Tensor<T>,
    params: &ModelParams<T>,
    spec: &ArchitectureSpec,
    keep: bool,
) -> Result<(Tensor<T>, Option<ForwardCache<T>>)> {
    let (height, width) = check_inputs(y_spatial, y_spectral, spec)?;
    params.check_spec(spec)?;

    let mut branch_pre = Vec::with_capacity(2 * spec.scales.len());
    for (layer, input, name) in params
        .spatial
        .iter()
        .map(|l| (l, y_spatial, "spatial branch"))
        .chain(params.spectral.iter().map(|l| (l, y_spectral, "spectral branch")))
    {
        branch_pre.push(conv2d_forward(input, layer).map_err(in_layer(name))?);
    }
    let fused = if spec.branch_relu {
        let post: Vec<Tensor<T>> = branch_pre.iter().map(relu_forward).collect();
        concat_channels(&post.iter().collect::<Vec<_>>())?
    } else {
        concat_channels(&branch_pre.iter().collect::<Vec<_>>())?
    };

    let mut trunk_pre = Vec::new();
    let mut trunk_post: Vec<Tensor<T>> = Vec::new();
    let mut tap_maps: Vec<Tensor<T>> = Vec::new();
    let mut current: Option<Tensor<T>> = None;
    for (i, layer) in params.trunk.iter().enumerate() {
        let input = current.as_ref().unwrap_or(&fused);
        let pre = conv2d_forward(input, layer).map_err(in_layer(&format!("trunk layer {}", i + 1)))?;
        let post = relu_forward(&pre);
        if spec.tap_layers.contains(&(i + 1)) {
            tap_maps.push(post.clone());
        }
        if keep {
            trunk_pre.push(pre);
            if let Some(prev) = current.take() {
                trunk_post.push(prev);
            }
        }
        current = Some(post);
    }
    if keep {
        trunk_post.extend(current.take());
    }
    let taps = concat_channels(&tap_maps.iter().collect::<Vec<_>>())?;
    let phi = conv2d_forward(&taps, &params.head).map_err(in_layer("head"))?;

    let cache = keep.then(|| ForwardCache {
        spec: spec.clone(),
        height,
        width,
        y_spatial: y_spatial.clone(),
        y_spectral: y_spectral.clone(),
        branch_pre,
        fused,
        trunk_pre,
        trunk_post,
        taps,
    });
    Ok((phi, cache))
}

/// Predicts the residual `phi` and records the activations needed by [`backward`].
pub fn forward<T: Scalar>(
    y_spatial: &Tensor<T>,
    y_spectral: &Tensor<T>,
    params: &ModelParams<T>,
    spec: &ArchitectureSpec,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let (phi, cache) = run(y_spatial, y_spectral, params, spec, true)?;
    Ok((phi, cache.expect("cache requested")))
}

/// Residual prediction without keeping intermediate activations.
pub fn predict_residual<T: Scalar>(
    y_spatial: &Tensor<T>,
    y_spectral: &Tensor<T>,
    params: &ModelParams<T>,
    spec: &ArchitectureSpec,
) -> Result<Tensor<T>> {
    Ok(run(y_spatial, y_spectral, params, spec, false)?.0)
}

/// Denoised band `y_spatial + phi`.
pub fn denoise_patch<T: Scalar>(
    y_spatial: &Tensor<T>,
    y_spectral: &Tensor<T>,
    params: &ModelParams<T>,
    spec: &ArchitectureSpec,
) -> Result<Tensor<T>> {
    let phi = predict_residual(y_spatial, y_spectral, params, spec)?;
    residual_add(y_spatial, &phi)
}

/// Exact gradient of `sum(grad_phi * phi)` with respect to every parameter.
pub fn backward<T: Scalar>(
    cache: &ForwardCache<T>,
    params: &ModelParams<T>,
    grad_phi: &Tensor<T>,
) -> Result<ParamGradients<T>> {
    let spec = &cache.spec;
    params
        .check_spec(spec)
        .map_err(|e| HsidError::InvalidArgument(format!("forward cache does not match parameters: {e}")))?;
    grad_phi.expect_shape(&[1, cache.height, cache.width], "grad_phi")?;
    let mut grads = ModelParams::<T>::zeros(spec);

    let head = conv2d_backward_impl(&cache.taps, &params.head, grad_phi, true)?;
    grads.head = ConvLayerParams { weights: head.grad_weights, bias: head.grad_bias };
    let tap_sizes = vec![spec.trunk_channels; spec.tap_layers.len()];
    let mut tap_grads = split_channels(&head.grad_input.expect("input grad requested"), &tap_sizes)?
        .into_iter()
        .rev();

    // Gradient w.r.t. the post-ReLU output of the layer being processed; a
    // tap layer receives both the head path and the next trunk layer's path.
    let mut downstream: Option<Tensor<T>> = None;
    for l in (1..=spec.trunk_depth).rev() {
        let mut g_post = downstream
            .take()
            .unwrap_or_else(|| Tensor::zeros(&[spec.trunk_channels, cache.height, cache.width]));
        if spec.tap_layers.contains(&l) {
            g_post.add_assign(&tap_grads.next().expect("one gradient per tap"))?;
        }
        let g_pre = relu_backward(&cache.trunk_pre[l - 1], &g_post)?;
        let input = if l == 1 { &cache.fused } else { &cache.trunk_post[l - 2] };
        let g = conv2d_backward_impl(input, &params.trunk[l - 1], &g_pre, true)?;
        grads.trunk[l - 1] = ConvLayerParams { weights: g.grad_weights, bias: g.grad_bias };
        downstream = g.grad_input;
    }

    let g_fused = downstream.expect("trunk has at least one layer");
    let branch_sizes = vec![spec.branch_channels; 2 * spec.scales.len()];
    let g_branches = split_channels(&g_fused, &branch_sizes)?;
    let n = spec.scales.len();
    for (i, g_out) in g_branches.into_iter().enumerate() {
        let g = if spec.branch_relu { relu_backward(&cache.branch_pre[i], &g_out)? } else { g_out };
        let (input, layer) = if i < n {
            (&cache.y_spatial, &params.spatial[i])
        } else {
            (&cache.y_spectral, &params.spectral[i - n])
        };
        let cg = conv2d_backward_impl(input, layer, &g, false)?;
        let slot = if i < n { &mut grads.spatial[i] } else { &mut grads.spectral[i - n] };
        *slot = ConvLayerParams { weights: cg.grad_weights, bias: cg.grad_bias };
    }
    Ok(grads)
}

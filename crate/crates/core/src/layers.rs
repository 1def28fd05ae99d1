//! Differentiable layer primitives: same-padded 2-D convolution, ReLU,
//! channel concatenation and the residual sum.
//!
//! Convolution uses cross-correlation orientation (no kernel flip) and zero
//! padding of `(k - 1) / 2` on every border, so spatial size is preserved.
//! It is lowered to im2col + GEMM over bands of output rows to keep the
//! column buffer bounded for large frames.

use crate::error::{HsidError, Result};
use crate::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

/// Upper bound on im2col buffer elements per row band.
const COLUMN_BUDGET: usize = 1 << 19;

/// Weights `[out, in, k, k]` and bias `[out]` of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvLayerParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let layer = ConvLayerParams { weights, bias };
        layer.validate()?;
        Ok(layer)
    }

    pub fn zeros(out_channels: usize, in_channels: usize, k: usize) -> Self {
        ConvLayerParams {
            weights: Tensor::zeros(&[out_channels, in_channels, k, k]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weights.shape();
        if s.len() != 4 {
            return Err(HsidError::shape("conv weights", "rank", 4, s.len()));
        }
        if s[2] != s[3] {
            return Err(HsidError::shape("conv weights", "kernel width", s[2], s[3]));
        }
        if s[2] % 2 == 0 {
            return Err(HsidError::InvalidArgument(format!(
                "kernel size must be odd, got {}",
                s[2]
            )));
        }
        self.bias.expect_shape(&[s[0]], "conv bias")
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Gradients of `sum(grad_out * conv(input))`.
#[derive(Debug, Clone)]
pub struct ConvGradients<T> {
    pub grad_input: Option<Tensor<T>>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

fn check_input<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvLayerParams<T>,
    context: &str,
) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.dims3(context)?;
    if c != params.in_channels() {
        return Err(HsidError::shape(context, "input channels", params.in_channels(), c));
    }
    Ok((c, h, w))
}

fn rows_per_band(cikk: usize, width: usize, height: usize) -> usize {
    (COLUMN_BUDGET / (cikk * width).max(1)).clamp(1, height)
}

/// Fills `col` (`[c*k*k, (r1-r0)*w]`) with the receptive fields of output rows `r0..r1`.
fn im2col<T: Scalar>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    r0: usize,
    r1: usize,
    col: &mut [T],
) {
    let pad = (k / 2) as isize;
    let cols = (r1 - r0) * w;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).clamp(0, w as isize) as usize;
                for y in r0..r1 {
                    let out = &mut dst[(y - r0) * w..(y - r0 + 1) * w];
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(T::zero());
                    out[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Scatter-adds `col` back onto `grad_input`; the adjoint of [`im2col`].
fn col2im_add<T: Scalar>(
    col: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    r0: usize,
    r1: usize,
    grad_input: &mut [T],
) {
    let pad = (k / 2) as isize;
    let cols = (r1 - r0) * w;
    for ci in 0..c {
        let plane = &mut grad_input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).clamp(0, w as isize) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in r0..r1 {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let g = &src[(y - r0) * w..(y - r0 + 1) * w];
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, &v) in dst.iter_mut().zip(&g[x_lo..x_hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Same-padded convolution: `out[c] = bias[c] + sum_ci input[ci] (*) weights[c, ci]`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, params: &ConvLayerParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let (c, h, w) = check_input(input, params, "conv2d_forward")?;
    let k = params.kernel_size();
    let co = params.out_channels();
    let cikk = c * k * k;
    let hw = h * w;
    let mut out = Tensor::zeros(&[co, h, w]);
    let band = rows_per_band(cikk, w, h);
    let mut col = vec![T::zero(); cikk * band * w];
    let mut r0 = 0;
    while r0 < h {
        let r1 = (r0 + band).min(h);
        let cols = (r1 - r0) * w;
        im2col(input.data(), (c, h, w), k, r0, r1, &mut col[..cikk * cols]);
        gemm(
            MatRef { data: params.weights.data(), rows: co, cols: cikk, rs: cikk, cs: 1 },
            MatRef { data: &col[..cikk * cols], rows: cikk, cols, rs: cols, cs: 1 },
            T::zero(),
            MatMut { data: &mut out.data_mut()[r0 * w..], rows: co, cols, rs: hw, cs: 1 },
        );
        r0 = r1;
    }
    let bias = params.bias.data();
    for (plane, &b) in out.data_mut().chunks_mut(hw).zip(bias) {
        plane.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// Exact gradients of `sum(grad_out * conv2d_forward(input, params))` with
/// respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvLayerParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGradients<T>> {
    conv2d_backward_impl(input, params, grad_out, true)
}

pub(crate) fn conv2d_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvLayerParams<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGradients<T>> {
    params.validate()?;
    let (c, h, w) = check_input(input, params, "conv2d_backward")?;
    let k = params.kernel_size();
    let co = params.out_channels();
    grad_out.expect_shape(&[co, h, w], "conv2d_backward grad_out")?;
    let cikk = c * k * k;
    let hw = h * w;

    let mut grad_bias = Tensor::zeros(&[co]);
    for (gb, plane) in grad_bias.data_mut().iter_mut().zip(grad_out.data().chunks(hw)) {
        *gb = plane.iter().copied().sum();
    }

    let mut grad_weights = Tensor::zeros(params.weights.shape());
    let mut grad_input = need_input_grad.then(|| Tensor::zeros(&[c, h, w]));
    let band = rows_per_band(cikk, w, h);
    let mut col = vec![T::zero(); cikk * band * w];
    let mut gcol = if need_input_grad { vec![T::zero(); cikk * band * w] } else { Vec::new() };
    let mut r0 = 0;
    while r0 < h {
        let r1 = (r0 + band).min(h);
        let cols = (r1 - r0) * w;
        let g_chunk = MatRef { data: &grad_out.data()[r0 * w..], rows: co, cols, rs: hw, cs: 1 };
        im2col(input.data(), (c, h, w), k, r0, r1, &mut col[..cikk * cols]);
        gemm(
            g_chunk,
            MatRef { data: &col[..cikk * cols], rows: cols, cols: cikk, rs: 1, cs: cols },
            T::one(),
            MatMut { data: grad_weights.data_mut(), rows: co, cols: cikk, rs: cikk, cs: 1 },
        );
        if let Some(gi) = grad_input.as_mut() {
            gemm(
                MatRef { data: params.weights.data(), rows: cikk, cols: co, rs: 1, cs: cikk },
                g_chunk,
                T::zero(),
                MatMut { data: &mut gcol[..cikk * cols], rows: cikk, cols, rs: cols, cs: 1 },
            );
            col2im_add(&gcol[..cikk * cols], (c, h, w), k, r0, r1, gi.data_mut());
        }
        r0 = r1;
    }
    Ok(ConvGradients {
        grad_input,
        grad_weights,
        grad_bias,
    })
}

/// Elementwise `max(x, 0)`.
pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `grad_out` masked by `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(x.shape(), "relu_backward")?;
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

/// Stacks `[C_i, H, W]` parts along the channel axis, in the given order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| HsidError::InvalidArgument("concat_channels needs at least one part".into()))?;
    let (_, h, w) = first.dims3("concat_channels")?;
    let mut total = 0;
    for part in parts {
        let (c, ph, pw) = part.dims3("concat_channels")?;
        if ph != h {
            return Err(HsidError::shape("concat_channels", "height", h, ph));
        }
        if pw != w {
            return Err(HsidError::shape("concat_channels", "width", w, pw));
        }
        total += c;
    }
    let mut data = Vec::with_capacity(total * h * w);
    for part in parts {
        data.extend_from_slice(part.data());
    }
    Tensor::zeros(&[total, h, w]).with_data(data)
}

/// Inverse of [`concat_channels`]: routes a `[sum C_i, H, W]` tensor back into parts.
pub fn split_channels<T: Scalar>(whole: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (c, h, w) = whole.dims3("split_channels")?;
    let total: usize = sizes.iter().sum();
    if total != c {
        return Err(HsidError::shape("split_channels", "channels", total, c));
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let span = size * h * w;
        out.push(Tensor::zeros(&[size, h, w]).with_data(whole.data()[offset..offset + span].to_vec())?);
        offset += span;
    }
    Ok(out)
}

/// `y_spatial + phi`: the only place a reconstruction is formed.
pub fn residual_add<T: Scalar>(y_spatial: &Tensor<T>, phi: &Tensor<T>) -> Result<Tensor<T>> {
    phi.expect_shape(y_spatial.shape(), "residual_add")?;
    let mut out = y_spatial.clone();
    out.add_assign(phi)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop same-padded cross-correlation.
    fn direct_conv(input: &Tensor<f64>, p: &ConvLayerParams<f64>) -> Tensor<f64> {
        let (c, h, w) = input.dims3("oracle").unwrap();
        let (co, k) = (p.out_channels(), p.kernel_size());
        let pad = (k / 2) as isize;
        let wt = p.weights.data();
        Tensor::from_fn(&[co, h, w], |idx| {
            let (o, y, x) = (idx / (h * w), (idx / w) % h, idx % w);
            let mut acc = p.bias.data()[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        let sx = x as isize + kx as isize - pad;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            acc += wt[((o * c + ci) * k + ky) * k + kx]
                                * input.data()[(ci * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random(&[1, 3, 3], &mut rng);
        let mut p = ConvLayerParams::<f64>::zeros(1, 1, 3);
        p.weights.data_mut()[4] = 1.0;
        assert_eq!(conv2d_forward(&input, &p).unwrap(), input);
    }

    #[test]
    fn zero_weights_broadcast_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random(&[2, 5, 4], &mut rng);
        let mut p = ConvLayerParams::<f64>::zeros(1, 2, 5);
        p.bias.data_mut()[0] = 0.75;
        let out = conv2d_forward(&input, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn forward_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random(&[1, 4, 4], &mut rng);
        let p = ConvLayerParams::new(random(&[2, 1, 3, 3], &mut rng), random(&[2], &mut rng)).unwrap();
        let got = conv2d_forward(&input, &p).unwrap();
        let want = direct_conv(&input, &p);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_oracle_across_row_bands() {
        // 120 input channels forces several row bands on a 60-row frame.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random(&[120, 60, 80], &mut rng);
        let p = ConvLayerParams::new(random(&[2, 120, 3, 3], &mut rng), random(&[2], &mut rng)).unwrap();
        assert!(rows_per_band(120 * 9, 80, 60) < 60);
        let got = conv2d_forward(&input, &p).unwrap();
        let want = direct_conv(&input, &p);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_errors_name_dimension() {
        let p = ConvLayerParams::<f64>::zeros(2, 3, 3);
        let err = conv2d_forward(&Tensor::zeros(&[2, 4, 4]), &p).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let err = conv2d_backward(&Tensor::zeros(&[3, 4, 4]), &p, &Tensor::zeros(&[2, 4, 5])).unwrap_err();
        assert!(err.to_string().contains("dim 2"), "{err}");
        assert!(ConvLayerParams::<f64>::new(Tensor::zeros(&[1, 1, 2, 2]), Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random(&[2, 5, 5], &mut rng);
        let p = ConvLayerParams::new(random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)).unwrap();
        let g = conv2d_backward(&input, &p, &Tensor::zeros(&[3, 5, 5])).unwrap();
        assert!(g.grad_input.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.grad_weights.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_spatial_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random(&[1, 5, 5], &mut rng);
        let p = ConvLayerParams::new(random(&[2, 1, 3, 3], &mut rng), random(&[2], &mut rng)).unwrap();
        let go = random(&[2, 5, 5], &mut rng);
        let g = conv2d_backward(&input, &p, &go).unwrap();
        for c in 0..2 {
            let s: f64 = go.channel(c).iter().sum();
            assert!((g.grad_bias.data()[c] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random(&[1, 5, 5], &mut rng);
        let p = ConvLayerParams::new(random(&[2, 1, 3, 3], &mut rng), random(&[2], &mut rng)).unwrap();
        let go = random(&[2, 5, 5], &mut rng);
        let objective = |x: &Tensor<f64>, p: &ConvLayerParams<f64>| -> f64 {
            let y = conv2d_forward(x, p).unwrap();
            y.data().iter().zip(go.data()).map(|(a, b)| a * b).sum()
        };
        let g = conv2d_backward(&input, &p, &go).unwrap();

        let num_in = finite_diff_grad(|x| objective(x, &p), &input, 1e-5);
        let num_w = finite_diff_grad(
            |wt| objective(&input, &ConvLayerParams::new(wt.clone(), p.bias.clone()).unwrap()),
            &p.weights,
            1e-5,
        );
        let num_b = finite_diff_grad(
            |b| objective(&input, &ConvLayerParams::new(p.weights.clone(), b.clone()).unwrap()),
            &p.bias,
            1e-5,
        );
        assert!(relative_error(g.grad_input.as_ref().unwrap(), &num_in) < 1e-6);
        assert!(relative_error(&g.grad_weights, &num_w) < 1e-6);
        assert!(relative_error(&g.grad_bias, &num_b) < 1e-6);
    }

    #[test]
    fn relu_sign_cases() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::filled(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);

        let neg = Tensor::from_vec(&[4], vec![-1.0, -0.5, -3.0, -1e-9]).unwrap();
        assert!(relu_forward(&neg).data().iter().all(|&v| v == 0.0));
        let g = relu_backward(&neg, &Tensor::filled(&[4], 2.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(relu_backward(&neg, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn relu_backward_matches_finite_differences_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_fn(&[2, 4, 4], |_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        });
        let go = random(&[2, 4, 4], &mut rng);
        let f = |t: &Tensor<f64>| relu_forward(t).data().iter().zip(go.data()).map(|(a, b)| a * b).sum();
        let numeric = finite_diff_grad(f, &x, 1e-5);
        let analytic = relu_backward(&x, &go).unwrap();
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn concat_of_six_branches_gives_120_channels() {
        let part = Tensor::<f32>::zeros(&[20, 4, 4]);
        let parts = vec![&part; 6];
        assert_eq!(concat_channels(&parts).unwrap().shape(), &[120, 4, 4]);
    }

    #[test]
    fn concat_single_part_is_identity_and_checks_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&[3, 4, 5], &mut rng);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let b = random(&[1, 4, 6], &mut rng);
        let err = concat_channels(&[&a, &b]).unwrap_err();
        assert!(err.to_string().contains("width"));
        assert!(concat_channels::<f64>(&[]).is_err());
    }

    #[test]
    fn residual_add_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let clean = random(&[1, 6, 6], &mut rng);
        let noise = random(&[1, 6, 6], &mut rng);
        let mut y = clean.clone();
        y.add_assign(&noise).unwrap();
        assert_eq!(residual_add(&y, &Tensor::zeros(&[1, 6, 6])).unwrap(), y);
        let back = residual_add(&y, &noise.map(|v| -v)).unwrap();
        for (a, b) in back.data().iter().zip(clean.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(residual_add(&clean, &noise).unwrap(), residual_add(&noise, &clean).unwrap());
        assert!(residual_add(&clean, &Tensor::zeros(&[1, 6, 5])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn conv_is_linear_without_bias(seed in any::<u64>(), alpha in -5.0f64..5.0, k in prop::sample::select(vec![1usize, 3, 5, 7])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 6, 7], &mut rng);
            let p = ConvLayerParams::new(random(&[3, 2, k, k], &mut rng), Tensor::zeros(&[3])).unwrap();
            let y = conv2d_forward(&x, &p).unwrap();
            let ys = conv2d_forward(&x.map(|v| alpha * v), &p).unwrap();
            prop_assert_eq!(ys.shape(), &[3, 6, 7]);
            let norm = y.data().iter().map(|v| (alpha * v).abs()).fold(0.0, f64::max).max(1e-300);
            for (a, b) in ys.data().iter().zip(y.data()) {
                prop_assert!((a - alpha * b).abs() <= 1e-10 * norm);
            }
        }

        #[test]
        fn concat_split_roundtrip_and_gradient_conservation(seed in any::<u64>(), sizes in prop::collection::vec(1usize..4, 1..5)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parts: Vec<Tensor<f64>> = sizes.iter().map(|&c| random(&[c, 3, 2], &mut rng)).collect();
            let refs: Vec<&Tensor<f64>> = parts.iter().collect();
            let whole = concat_channels(&refs).unwrap();
            let back = split_channels(&whole, &sizes).unwrap();
            prop_assert_eq!(&back, &parts);
            let total: f64 = back.iter().map(|t| t.sum()).sum();
            prop_assert!((total - whole.sum()).abs() < 1e-12);
        }
    }
}

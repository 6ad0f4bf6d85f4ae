//! Forward and backward kernels for the fixed operator set.
//!
//! Every backward function takes exactly what its forward saved and returns
//! fresh gradient tensors; accumulation into parameter slots happens in the
//! trace.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

const KERNEL: usize = 3;
const PAD: usize = 1;

fn expect_dim(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            op,
            dim,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Unfolds one `[c, h, w]` image into `[c * 9, h * w]` patch columns.
fn im2col<T: Scalar>(image: &[T], channels: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &image[c * hw..(c + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let iy = y + ky;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if iy < PAD || iy - PAD >= h {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - PAD) * w..(iy - PAD + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let ix = x + kx;
                        *o = if ix < PAD || ix - PAD >= w {
                            T::zero()
                        } else {
                            src[ix - PAD]
                        };
                    }
                }
            }
        }
    }
}

/// Folds patch-column gradients back onto a `[c, h, w]` image, accumulating.
fn col2im<T: Scalar>(cols: &[T], channels: usize, h: usize, w: usize, image: &mut [T]) {
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut image[c * hw..(c + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let iy = y + ky;
                    if iy < PAD || iy - PAD >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - PAD) * w..(iy - PAD + 1) * w];
                    for x in 0..w {
                        let ix = x + kx;
                        if ix >= PAD && ix - PAD < w {
                            dst[ix - PAD] = dst[ix - PAD] + src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<([usize; 4], usize)> {
    let [b, c_in, h, w] = input.dims4("conv2d")?;
    let [c_out, w_in, kh, kw] = weight.dims4("conv2d")?;
    expect_dim("conv2d", "weight input channels", c_in, w_in)?;
    expect_dim("conv2d", "kernel height", KERNEL, kh)?;
    expect_dim("conv2d", "kernel width", KERNEL, kw)?;
    expect_dim("conv2d", "bias length", c_out, bias.len())?;
    Ok(([b, c_in, h, w], c_out))
}

/// 3x3 cross-correlation, stride 1, zero padding 1.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let ([b, c_in, h, w], c_out) = conv_dims(input, weight, bias)?;
    let hw = h * w;
    let k = c_in * KERNEL * KERNEL;
    let mut out = Tensor::zeros(&[b, c_out, h, w])?;
    let mut cols = vec![T::zero(); k * hw];
    let in_stride = c_in * hw;
    let out_stride = c_out * hw;
    for n in 0..b {
        im2col(&input.data()[n * in_stride..(n + 1) * in_stride], c_in, h, w, &mut cols);
        let dst = &mut out.data_mut()[n * out_stride..(n + 1) * out_stride];
        for (co, plane) in dst.chunks_mut(hw).enumerate() {
            plane.fill(bias.data()[co]);
        }
        T::gemm(
            c_out,
            k,
            hw,
            T::one(),
            weight.data(),
            (k as isize, 1),
            &cols,
            (hw as isize, 1),
            T::one(),
            dst,
            (hw as isize, 1),
        );
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [b, c_in, h, w] = input.dims4("conv2d_backward")?;
    let [c_out, _, _, _] = weight.dims4("conv2d_backward")?;
    let [gb, gc, gh, gw] = grad_out.dims4("conv2d_backward")?;
    expect_dim("conv2d_backward", "batch", b, gb)?;
    expect_dim("conv2d_backward", "output channels", c_out, gc)?;
    expect_dim("conv2d_backward", "height", h, gh)?;
    expect_dim("conv2d_backward", "width", w, gw)?;

    let hw = h * w;
    let k = c_in * KERNEL * KERNEL;
    let mut d_input = Tensor::zeros_like(input);
    let mut d_weight = Tensor::zeros_like(weight);
    let mut d_bias = Tensor::zeros(&[c_out])?;
    let mut cols = vec![T::zero(); k * hw];
    let mut d_cols = vec![T::zero(); k * hw];
    let in_stride = c_in * hw;
    let out_stride = c_out * hw;
    for n in 0..b {
        let dy = &grad_out.data()[n * out_stride..(n + 1) * out_stride];
        for (co, plane) in dy.chunks(hw).enumerate() {
            d_bias.data_mut()[co] = d_bias.data()[co] + plane.iter().copied().sum();
        }
        im2col(&input.data()[n * in_stride..(n + 1) * in_stride], c_in, h, w, &mut cols);
        // dW += dY [c_out, hw] * cols^T [hw, k]
        T::gemm(
            c_out,
            hw,
            k,
            T::one(),
            dy,
            (hw as isize, 1),
            &cols,
            (1, hw as isize),
            T::one(),
            d_weight.data_mut(),
            (k as isize, 1),
        );
        // dCols = W^T [k, c_out] * dY [c_out, hw]
        T::gemm(
            k,
            c_out,
            hw,
            T::one(),
            weight.data(),
            (1, k as isize),
            dy,
            (hw as isize, 1),
            T::zero(),
            &mut d_cols,
            (hw as isize, 1),
        );
        col2im(
            &d_cols,
            c_in,
            h,
            w,
            &mut d_input.data_mut()[n * in_stride..(n + 1) * in_stride],
        );
    }
    Ok(ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics; running statistics left untouched.
    BatchStats,
}

impl NormMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, NormMode::Eval)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn fresh(channels: usize) -> Result<Self> {
        Ok(Self {
            mean: Tensor::zeros(&[channels])?,
            var: Tensor::full(&[channels], T::one())?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for NormParams {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// Values saved by a batch-norm forward pass for its backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

/// Per-channel normalization over the batch and spatial axes.
///
/// Running variance is updated with the unbiased batch variance.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: NormMode,
    running: &mut RunningStats<T>,
    params: NormParams,
) -> Result<(Tensor<T>, NormCache<T>)> {
    if !(params.epsilon > 0.0) {
        return Err(Error::InvalidHyperparameter {
            name: "batch norm epsilon",
            value: params.epsilon,
        });
    }
    let [b, c, h, w] = input.dims4("batchnorm")?;
    expect_dim("batchnorm", "gamma length", c, gamma.len())?;
    expect_dim("batchnorm", "beta length", c, beta.len())?;
    expect_dim("batchnorm", "running mean length", c, running.mean.len())?;
    let hw = h * w;
    let count = b * hw;
    if mode.uses_batch_stats() && count < 2 {
        return Err(Error::BatchTooSmall(count));
    }
    let eps = T::from_f64_lossy(params.epsilon);
    let momentum = T::from_f64_lossy(params.momentum);
    let count_t = T::from_usize(count).unwrap();

    let mut normalized = Tensor::zeros_like(input);
    let mut out = Tensor::zeros_like(input);
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let planes = || (0..b).map(move |n| (n * c + ch) * hw);
        let (mean, var) = if mode.uses_batch_stats() {
            let mut sum = T::zero();
            for start in planes() {
                sum = sum + input.data()[start..start + hw].iter().copied().sum();
            }
            let mean = sum / count_t;
            let mut sq = T::zero();
            for start in planes() {
                for &v in &input.data()[start..start + hw] {
                    sq = sq + (v - mean) * (v - mean);
                }
            }
            let var = sq / count_t;
            if mode == NormMode::Train {
                let unbiased = sq / T::from_usize(count - 1).unwrap();
                let rm = &mut running.mean.data_mut()[ch];
                *rm = (T::one() - momentum) * *rm + momentum * mean;
                let rv = &mut running.var.data_mut()[ch];
                *rv = (T::one() - momentum) * *rv + momentum * unbiased;
            }
            (mean, var)
        } else {
            (running.mean.data()[ch], running.var.data()[ch])
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for start in planes() {
            for i in start..start + hw {
                let xhat = (input.data()[i] - mean) * istd;
                normalized.data_mut()[i] = xhat;
                out.data_mut()[i] = g * xhat + bt;
            }
        }
    }
    Ok((
        out,
        NormCache {
            normalized,
            inv_std,
            batch_stats: mode.uses_batch_stats(),
        },
    ))
}

pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<NormGrads<T>> {
    grad_out.expect_same_shape("batchnorm_backward", &cache.normalized)?;
    let [b, c, h, w] = grad_out.dims4("batchnorm_backward")?;
    let hw = h * w;
    let count = T::from_usize(b * hw).unwrap();
    let mut d_input = Tensor::zeros_like(grad_out);
    let mut d_gamma = Tensor::zeros(&[c])?;
    let mut d_beta = Tensor::zeros(&[c])?;
    let dy = grad_out.data();
    let xhat = cache.normalized.data();
    for ch in 0..c {
        let starts: Vec<usize> = (0..b).map(|n| (n * c + ch) * hw).collect();
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for &s in &starts {
            for i in s..s + hw {
                sum_dy = sum_dy + dy[i];
                sum_dy_xhat = sum_dy_xhat + dy[i] * xhat[i];
            }
        }
        d_gamma.data_mut()[ch] = sum_dy_xhat;
        d_beta.data_mut()[ch] = sum_dy;
        let g = gamma.data()[ch] * cache.inv_std[ch];
        for &s in &starts {
            for i in s..s + hw {
                d_input.data_mut()[i] = if cache.batch_stats {
                    g * (dy[i] - sum_dy / count - xhat[i] * sum_dy_xhat / count)
                } else {
                    g * dy[i]
                };
            }
        }
    }
    Ok(NormGrads {
        input: d_input,
        gamma: d_gamma,
        beta: d_beta,
    })
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient is passed only where the input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_same_shape("relu_backward", input)?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

/// 2x2 max-pool with stride 2. Returns the output and, for every output
/// element, the flat input index of the first (row-major) maximum.
pub fn maxpool2d_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = input.dims4("maxpool2d")?;
    if h < 2 || w < 2 {
        return Err(Error::SpatialTooSmall {
            op: "maxpool2d",
            height: h,
            width: w,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow])?;
    let mut argmax = vec![0usize; b * c * oh * ow];
    let src = input.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = src[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    expect_dim("maxpool2d_backward", "output length", argmax.len(), grad_out.len())?;
    let mut d_input = Tensor::zeros(input_shape)?;
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d_input.data_mut()[idx] = d_input.data()[idx] + g;
    }
    Ok(d_input)
}

/// `input [b, f] * weight^T [f, o] + bias`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, f] = input.dims2("linear")?;
    let [o, wf] = weight.dims2("linear")?;
    expect_dim("linear", "input features", wf, f)?;
    expect_dim("linear", "bias length", o, bias.len())?;
    let mut out = Tensor::from_fn(&[b, o], |i| bias.data()[i % o])?;
    T::gemm(
        b,
        f,
        o,
        T::one(),
        input.data(),
        (f as isize, 1),
        weight.data(),
        (1, f as isize),
        T::one(),
        out.data_mut(),
        (o as isize, 1),
    );
    Ok(out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let [b, f] = input.dims2("linear_backward")?;
    let [o, _] = weight.dims2("linear_backward")?;
    let [gb, go] = grad_out.dims2("linear_backward")?;
    expect_dim("linear_backward", "batch", b, gb)?;
    expect_dim("linear_backward", "output features", o, go)?;
    let mut d_input = Tensor::zeros(&[b, f])?;
    let mut d_weight = Tensor::zeros(&[o, f])?;
    T::gemm(
        b,
        o,
        f,
        T::one(),
        grad_out.data(),
        (o as isize, 1),
        weight.data(),
        (f as isize, 1),
        T::zero(),
        d_input.data_mut(),
        (f as isize, 1),
    );
    T::gemm(
        o,
        b,
        f,
        T::one(),
        grad_out.data(),
        (1, o as isize),
        input.data(),
        (f as isize, 1),
        T::zero(),
        d_weight.data_mut(),
        (f as isize, 1),
    );
    let mut d_bias = Tensor::zeros(&[o])?;
    for r in 0..b {
        for j in 0..o {
            d_bias.data_mut()[j] = d_bias.data()[j] + grad_out.data()[r * o + j];
        }
    }
    Ok(LinearGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}

//! Forward and backward kernels for the layers used by the classifier.
//!
//! All kernels are plain functions over [`Tensor`]s. They are shared by the
//! autodiff tape and by the direct-loop reference tests.

use crate::error::{MilError, Result};
use crate::tensor::Tensor;

/// Output extent of a stride-`stride` convolution with "same" padding.
pub fn conv_output_len(input_len: usize, stride: usize) -> usize {
    input_len.div_ceil(stride)
}

/// Output positions `[lo, hi)` for which kernel tap `tap` reads inside the input.
fn valid_range(tap: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let reach = in_len as isize - 1 + pad as isize - tap as isize;
    if reach < 0 {
        return (0, 0);
    }
    let hi = (reach as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

struct ConvGeometry {
    in_channels: usize,
    out_channels: usize,
    height: usize,
    width: usize,
    ksize: usize,
    pad: usize,
    stride: usize,
    out_height: usize,
    out_width: usize,
}

fn conv_geometry(input: &Tensor, kernel: &Tensor, stride: usize) -> Result<ConvGeometry> {
    let (c, h, w) = input.chw()?;
    let [o, kc, kh, kw] = kernel.shape() else {
        return Err(MilError::Shape(format!(
            "conv kernel must be (out, in, k, k), got {:?}",
            kernel.shape()
        )));
    };
    let (o, kc, kh, kw) = (*o, *kc, *kh, *kw);
    if kc != c {
        return Err(MilError::Shape(format!(
            "conv kernel expects {kc} input channels, input has {c}"
        )));
    }
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(MilError::Shape(format!(
            "conv kernel must be 1x1 or 3x3, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(MilError::Shape("conv stride must be positive".into()));
    }
    Ok(ConvGeometry {
        in_channels: c,
        out_channels: o,
        height: h,
        width: w,
        ksize: kh,
        pad: kh / 2,
        stride,
        out_height: conv_output_len(h, stride),
        out_width: conv_output_len(w, stride),
    })
}

/// 2D cross-correlation with zero "same" padding (`pad = k / 2`).
///
/// `input` is `(C, H, W)`, `kernel` is `(O, C, k, k)` with `k` in `{1, 3}` and
/// `bias` has `O` entries. The output is `(O, ceil(H / stride), ceil(W / stride))`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, stride)?;
    if bias.len() != g.out_channels {
        return Err(MilError::Shape(format!(
            "conv bias has {} entries, kernel has {} output channels",
            bias.len(),
            g.out_channels
        )));
    }
    let (k, s, pad) = (g.ksize, g.stride, g.pad);
    let plane_len = g.out_height * g.out_width;
    let mut out = vec![0.0; g.out_channels * plane_len];
    let x = input.data();
    let wts = kernel.data();

    for (oc, plane) in out.chunks_exact_mut(plane_len).enumerate() {
        plane.fill(bias.data()[oc]);
        for ic in 0..g.in_channels {
            let in_plane = &x[ic * g.height * g.width..(ic + 1) * g.height * g.width];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky, pad, s, g.height, g.out_height);
                for kx in 0..k {
                    let wgt = wts[((oc * g.in_channels + ic) * k + ky) * k + kx];
                    let (ox0, ox1) = valid_range(kx, pad, s, g.width, g.out_width);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - pad;
                        let in_row = &in_plane[iy * g.width..(iy + 1) * g.width];
                        let out_row = &mut plane[oy * g.out_width + ox0..oy * g.out_width + ox1];
                        if s == 1 {
                            let ix0 = ox0 + kx - pad;
                            for (o, i) in out_row.iter_mut().zip(&in_row[ix0..ix0 + (ox1 - ox0)]) {
                                *o += wgt * i;
                            }
                        } else {
                            for (n, o) in out_row.iter_mut().enumerate() {
                                *o += wgt * in_row[(ox0 + n) * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.out_channels, g.out_height, g.out_width], out)
}

/// Gradients of [`conv2d`] with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let g = conv_geometry(input, kernel, stride)?;
    if grad_out.shape() != [g.out_channels, g.out_height, g.out_width] {
        return Err(MilError::Shape(format!(
            "conv output gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.out_channels, g.out_height, g.out_width]
        )));
    }
    let (k, s, pad) = (g.ksize, g.stride, g.pad);
    let plane_len = g.out_height * g.out_width;
    let in_len = g.height * g.width;
    let x = input.data();
    let wts = kernel.data();
    let gout = grad_out.data();

    let mut gin = vec![0.0; x.len()];
    let mut gk = vec![0.0; wts.len()];
    let mut gb = vec![0.0; g.out_channels];

    for oc in 0..g.out_channels {
        let gplane = &gout[oc * plane_len..(oc + 1) * plane_len];
        gb[oc] = gplane.iter().sum();
        for ic in 0..g.in_channels {
            let in_plane = &x[ic * in_len..(ic + 1) * in_len];
            let gin_plane = &mut gin[ic * in_len..(ic + 1) * in_len];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky, pad, s, g.height, g.out_height);
                for kx in 0..k {
                    let widx = ((oc * g.in_channels + ic) * k + ky) * k + kx;
                    let wgt = wts[widx];
                    let (ox0, ox1) = valid_range(kx, pad, s, g.width, g.out_width);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - pad;
                        let grow = &gplane[oy * g.out_width + ox0..oy * g.out_width + ox1];
                        let row = iy * g.width;
                        if s == 1 {
                            let ix0 = row + ox0 + kx - pad;
                            let in_row = &in_plane[ix0..ix0 + grow.len()];
                            for (go, xi) in grow.iter().zip(in_row) {
                                acc += go * xi;
                            }
                            let gin_row = &mut gin_plane[ix0..ix0 + grow.len()];
                            for (gi, go) in gin_row.iter_mut().zip(grow) {
                                *gi += wgt * go;
                            }
                        } else {
                            for (n, go) in grow.iter().enumerate() {
                                let ix = row + (ox0 + n) * s + kx - pad;
                                acc += go * in_plane[ix];
                                gin_plane[ix] += wgt * go;
                            }
                        }
                    }
                    gk[widx] = acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gin)?,
        kernel: Tensor::new(kernel.shape().to_vec(), gk)?,
        bias: Tensor::new(vec![g.out_channels], gb)?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Gradient of [`relu`]; the gate is closed at exactly zero.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(MilError::Shape(format!(
            "cannot add {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Mean over the spatial extent of every channel: `(C, H, W) -> (C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let n = (h * w) as f64;
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / n)
        .collect();
    Tensor::new(vec![c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[1], input_shape[2]);
    let n = (h * w) as f64;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat(g / n).take(h * w))
        .collect();
    Tensor::new(input_shape.to_vec(), data).expect("pool shape")
}

/// `out[j] = bias[j] + sum_i x[i] * weight[i, j]` with `weight` shaped `(features, outputs)`.
pub fn dense(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [f, n] = weight.shape() else {
        return Err(MilError::Shape(format!(
            "dense weight must be (features, outputs), got {:?}",
            weight.shape()
        )));
    };
    if x.len() != *f || bias.len() != *n {
        return Err(MilError::Shape(format!(
            "dense layer {f}x{n} cannot take {} features with {} biases",
            x.len(),
            bias.len()
        )));
    }
    let mut out = bias.data().to_vec();
    for (xi, wrow) in x.data().iter().zip(weight.data().chunks_exact(*n)) {
        for (o, w) in out.iter_mut().zip(wrow) {
            *o += xi * w;
        }
    }
    Tensor::new(vec![*n], out)
}

pub fn dense_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = grad_out.len();
    let g = grad_out.data();
    let gx = weight
        .data()
        .chunks_exact(n)
        .map(|wrow| wrow.iter().zip(g).map(|(w, g)| w * g).sum())
        .collect();
    let gw = x
        .data()
        .iter()
        .flat_map(|&xi| g.iter().map(move |&gj| xi * gj))
        .collect();
    (
        Tensor::new(x.shape().to_vec(), gx).expect("dense input shape"),
        Tensor::new(weight.shape().to_vec(), gw).expect("dense weight shape"),
        grad_out.clone(),
    )
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log(sum(exp(logits)))`, evaluated around the maximum logit.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let (argmax, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, z)| if z > best.1 { (i, z) } else { best });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    max + rest.ln_1p()
}

/// Categorical cross-entropy `-log(softmax(logits)[label])`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(MilError::Shape(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    // log(sum_j exp(z_j - z_label)), shifted so the largest term is exactly 1
    let shifted: Vec<f64> = logits.iter().map(|&z| z - logits[label]).collect();
    Ok(log_sum_exp(&shifted).max(0.0))
}

/// Gradient of [`softmax_cross_entropy`] with respect to the logits: `softmax - onehot`.
pub fn softmax_cross_entropy_backward(logits: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

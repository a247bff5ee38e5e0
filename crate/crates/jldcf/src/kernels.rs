//! Raw numeric kernels shared by the autodiff graph and the data pipeline.
//!
//! Everything here is a pure function over flat row-major buffers; shape
//! checking happens one level up in the graph ops.

use crate::error::OpError;

/// Spatial hyperparameters of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn unit() -> Self {
        ConvSpec {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }

    /// Stride-1 spec whose padding preserves spatial size for an odd kernel.
    pub fn size_preserving(kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Output extent of a strided, dilated, padded window op along one axis.
pub fn conv_out_extent(
    op: &'static str,
    axis: usize,
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<usize, OpError> {
    if stride < 1 {
        return Err(OpError::BadParam {
            op,
            what: "stride",
            got: stride as i64,
        });
    }
    if dilation < 1 {
        return Err(OpError::BadParam {
            op,
            what: "dilation",
            got: dilation as i64,
        });
    }
    let span = dilation as i64 * (kernel as i64 - 1) + 1;
    let numer = input as i64 + 2 * padding as i64 - span;
    if numer < 0 {
        return Err(OpError::DegenerateOutput {
            op,
            axis,
            got: numer / stride as i64,
        });
    }
    Ok((numer / stride as i64) as usize + 1)
}

/// Range of output positions whose receptive element `o*stride - padding + tap`
/// falls inside `[0, input)`.
#[inline]
fn valid_out_range(input: usize, out: usize, stride: usize, padding: usize, tap: usize) -> (usize, usize) {
    let off = tap as i64 - padding as i64; // in = o*stride + off
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let hi_i = (input as i64 - 1 - off) / stride as i64; // inclusive
    if hi_i < lo as i64 {
        (0, 0)
    } else {
        (lo, (hi_i as usize + 1).min(out))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    (n, c, ih, iw): (usize, usize, usize, usize),
    w: &[f64],
    (o, _wc, kh, kw): (usize, usize, usize, usize),
    b: &[f64],
    spec: ConvSpec,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ConvSpec {
        stride: s,
        dilation: d,
        padding: p,
    } = spec;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            let out_base = (ni * o + oi) * oh * ow;
            out[out_base..out_base + oh * ow].fill(b[oi]);
            for ci in 0..c {
                let x_base = (ni * c + ci) * ih * iw;
                for ky in 0..kh {
                    let (y0, y1) = valid_out_range(ih, oh, s, p, ky * d);
                    for kx in 0..kw {
                        let wv = w[((oi * c + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_out_range(iw, ow, s, p, kx * d);
                        for oy in y0..y1 {
                            let iy = oy * s + ky * d - p;
                            let row_x = x_base + iy * iw;
                            let row_o = out_base + oy * ow;
                            for ox in x0..x1 {
                                let ix = ox * s + kx * d - p;
                                out[row_o + ox] += wv * x[row_x + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input/weight/bias gradients for a convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    (n, c, ih, iw): (usize, usize, usize, usize),
    w: &[f64],
    (o, _wc, kh, kw): (usize, usize, usize, usize),
    spec: ConvSpec,
    (oh, ow): (usize, usize),
    g_out: &[f64],
    g_x: &mut [f64],
    g_w: &mut [f64],
    g_b: &mut [f64],
) {
    let ConvSpec {
        stride: s,
        dilation: d,
        padding: p,
    } = spec;
    for ni in 0..n {
        for oi in 0..o {
            let out_base = (ni * o + oi) * oh * ow;
            for v in &g_out[out_base..out_base + oh * ow] {
                g_b[oi] += v;
            }
            for ci in 0..c {
                let x_base = (ni * c + ci) * ih * iw;
                for ky in 0..kh {
                    let (y0, y1) = valid_out_range(ih, oh, s, p, ky * d);
                    for kx in 0..kw {
                        let w_idx = ((oi * c + ci) * kh + ky) * kw + kx;
                        let wv = w[w_idx];
                        let (x0, x1) = valid_out_range(iw, ow, s, p, kx * d);
                        let mut wg = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * s + ky * d - p;
                            let row_x = x_base + iy * iw;
                            let row_o = out_base + oy * ow;
                            for ox in x0..x1 {
                                let ix = ox * s + kx * d - p;
                                let g = g_out[row_o + ox];
                                wg += g * x[row_x + ix];
                                g_x[row_x + ix] += g * wv;
                            }
                        }
                        g_w[w_idx] += wg;
                    }
                }
            }
        }
    }
}

/// Max pooling; returns the output and the flat input index of each window's
/// maximum (first occurrence in row-major order within the window).
pub fn maxpool_forward(
    x: &[f64],
    (n, c, ih, iw): (usize, usize, usize, usize),
    spec: PoolSpec,
    (oh, ow): (usize, usize),
) -> (Vec<f64>, Vec<usize>) {
    let PoolSpec {
        kernel: k,
        stride: s,
        padding: p,
    } = spec;
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for plane in 0..n * c {
        let x_base = plane * ih * iw;
        let o_base = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                let mut first_valid = usize::MAX;
                for ky in 0..k {
                    let iy = oy as i64 * s as i64 + ky as i64 - p as i64;
                    if iy < 0 || iy >= ih as i64 {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as i64 * s as i64 + kx as i64 - p as i64;
                        if ix < 0 || ix >= iw as i64 {
                            continue;
                        }
                        let idx = x_base + iy as usize * iw + ix as usize;
                        if first_valid == usize::MAX {
                            first_valid = idx;
                        }
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                // all-NaN window: surface the NaN, route backward anywhere
                if best_idx == usize::MAX {
                    best_idx = first_valid;
                    best = x[first_valid];
                }
                out[o_base + oy * ow + ox] = best;
                arg[o_base + oy * ow + ox] = best_idx;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(g_out: &[f64], argmax: &[usize], g_x: &mut [f64]) {
    for (g, &idx) in g_out.iter().zip(argmax.iter()) {
        g_x[idx] += g;
    }
}

/// Linear interpolation taps for one axis under the aligned-corners
/// convention: `src = dst * (in-1) / (out-1)`.
#[inline]
fn lerp_taps(dst: usize, src_extent: usize, dst_extent: usize) -> (usize, usize, f64) {
    if dst_extent <= 1 || src_extent <= 1 {
        return (0, 0, 0.0);
    }
    let pos = dst as f64 * (src_extent - 1) as f64 / (dst_extent - 1) as f64;
    let lo = (pos.floor() as usize).min(src_extent - 1);
    let hi = (lo + 1).min(src_extent - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear interpolation of one plane to an arbitrary size, corners aligned.
pub fn resize_bilinear_plane(
    src: &[f64],
    (sw, sh): (usize, usize),
    (dw, dh): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; dw * dh];
    for dy in 0..dh {
        let (y0, y1, fy) = lerp_taps(dy, sh, dh);
        for dx in 0..dw {
            let (x0, x1, fx) = lerp_taps(dx, sw, dw);
            let v00 = src[y0 * sw + x0];
            let v01 = src[y0 * sw + x1];
            let v10 = src[y1 * sw + x0];
            let v11 = src[y1 * sw + x1];
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            out[dy * dw + dx] = top + (bot - top) * fy;
        }
    }
    out
}

pub fn upsample_forward(
    x: &[f64],
    (n, c, ih, iw): (usize, usize, usize, usize),
    factor: usize,
) -> Vec<f64> {
    let (oh, ow) = (ih * factor, iw * factor);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let plane_out = resize_bilinear_plane(
            &x[plane * ih * iw..(plane + 1) * ih * iw],
            (iw, ih),
            (ow, oh),
        );
        out[plane * oh * ow..(plane + 1) * oh * ow].copy_from_slice(&plane_out);
    }
    out
}

/// Transpose of `upsample_forward`: scatters with the same interpolation
/// weights, so <Up(x), y> == <x, Up^T(y)> holds by construction.
pub fn upsample_backward(
    g_out: &[f64],
    (n, c, ih, iw): (usize, usize, usize, usize),
    factor: usize,
    g_x: &mut [f64],
) {
    let (oh, ow) = (ih * factor, iw * factor);
    for plane in 0..n * c {
        let in_base = plane * ih * iw;
        let out_base = plane * oh * ow;
        for dy in 0..oh {
            let (y0, y1, fy) = lerp_taps(dy, ih, oh);
            for dx in 0..ow {
                let (x0, x1, fx) = lerp_taps(dx, iw, ow);
                let g = g_out[out_base + dy * ow + dx];
                g_x[in_base + y0 * iw + x0] += g * (1.0 - fy) * (1.0 - fx);
                g_x[in_base + y0 * iw + x1] += g * (1.0 - fy) * fx;
                g_x[in_base + y1 * iw + x0] += g * fy * (1.0 - fx);
                g_x[in_base + y1 * iw + x1] += g * fy * fx;
            }
        }
    }
}

/// Per-pixel softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels_forward(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for pix in 0..hw {
            let mut max_v = f64::NEG_INFINITY;
            for ci in 0..c {
                max_v = max_v.max(x[(ni * c + ci) * hw + pix]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                let e = (x[(ni * c + ci) * hw + pix] - max_v).exp();
                out[(ni * c + ci) * hw + pix] = e;
                z += e;
            }
            for ci in 0..c {
                out[(ni * c + ci) * hw + pix] /= z;
            }
        }
    }
    out
}

/// Softmax Jacobian-vector product: ds_i = s_i * (g_i - sum_j g_j s_j).
pub fn softmax_channels_backward(
    s: &[f64],
    g_out: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    g_x: &mut [f64],
) {
    let hw = h * w;
    for ni in 0..n {
        for pix in 0..hw {
            let mut dot = 0.0;
            for ci in 0..c {
                let idx = (ni * c + ci) * hw + pix;
                dot += g_out[idx] * s[idx];
            }
            for ci in 0..c {
                let idx = (ni * c + ci) * hw + pix;
                g_x[idx] += s[idx] * (g_out[idx] - dot);
            }
        }
    }
}

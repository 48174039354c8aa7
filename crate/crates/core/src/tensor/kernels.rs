//! Raw convolution and pooling kernels over row-major slices.
//!
//! These sit below the tape so that the gradient checker and the
//! nested-loop oracles in the tests can exercise them directly.

use crate::error::{Error, Result};

/// Resolved geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(size: usize, kernel: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let padded = size + 2 * pad;
    if kernel > padded {
        return Err(Error::input(format!(
            "kernel {axis} {kernel} exceeds padded input {axis} {padded}"
        )));
    }
    let span = padded - kernel;
    if !span.is_multiple_of(stride) {
        return Err(Error::config(format!(
            "{axis}: ({size} + 2*{pad} - {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

impl ConvGeometry {
    pub fn new(x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = x;
        let [out_channels, w_in, kernel_h, kernel_w] = w;
        if stride == 0 {
            return Err(Error::config("convolution stride must be positive"));
        }
        if w_in != in_channels {
            return Err(Error::input(format!(
                "kernel expects {w_in} input channels, input has {in_channels}"
            )));
        }
        let out_h = out_extent(in_h, kernel_h, stride, pad, "height")?;
        let out_w = out_extent(in_w, kernel_w, stride, pad, "width")?;
        Ok(ConvGeometry {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_h * self.out_w
    }
}

/// Output indices `o` in `[0, out)` with `0 <= o*stride + k - pad < size`.
#[inline]
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k { ((size - 1 + pad - k) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.output_len()];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let ksize = g.kernel_h * g.kernel_w;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let o = &mut out[(n * g.out_channels + co) * out_plane..][..out_plane];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for ci in 0..g.in_channels {
                let xp = &x[(n * g.in_channels + ci) * in_plane..][..in_plane];
                let wk = &w[(co * g.in_channels + ci) * ksize..][..ksize];
                for ky in 0..g.kernel_h {
                    let (oy_lo, oy_hi) = valid_range(g.out_h, g.in_h, ky, g.stride, g.pad);
                    for kx in 0..g.kernel_w {
                        let wv = wk[ky * g.kernel_w + kx];
                        let (ox_lo, ox_hi) = valid_range(g.out_w, g.in_w, kx, g.stride, g.pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut o[oy * g.out_w..][..g.out_w];
                            let xrow = &xp[iy * g.in_w..][..g.in_w];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.pad;
                                let dst = &mut orow[ox_lo..ox_hi];
                                let src = &xrow[ix0..ix0 + dst.len()];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input(g: &ConvGeometry, dout: &[f64], w: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; g.batch * g.in_channels * g.in_h * g.in_w];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let ksize = g.kernel_h * g.kernel_w;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let d = &dout[(n * g.out_channels + co) * out_plane..][..out_plane];
            for ci in 0..g.in_channels {
                let dxp = &mut dx[(n * g.in_channels + ci) * in_plane..][..in_plane];
                let wk = &w[(co * g.in_channels + ci) * ksize..][..ksize];
                for ky in 0..g.kernel_h {
                    let (oy_lo, oy_hi) = valid_range(g.out_h, g.in_h, ky, g.stride, g.pad);
                    for kx in 0..g.kernel_w {
                        let wv = wk[ky * g.kernel_w + kx];
                        let (ox_lo, ox_hi) = valid_range(g.out_w, g.in_w, kx, g.stride, g.pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let drow = &d[oy * g.out_w..][..g.out_w];
                            let xrow = &mut dxp[iy * g.in_w..][..g.in_w];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.pad;
                                let src = &drow[ox_lo..ox_hi];
                                let dst = &mut xrow[ix0..ix0 + src.len()];
                                for (t, s) in dst.iter_mut().zip(src) {
                                    *t += wv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    xrow[ox * g.stride + kx - g.pad] += wv * drow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of the convolution with respect to its kernel.
pub fn conv2d_backward_weight(g: &ConvGeometry, dout: &[f64], x: &[f64]) -> Vec<f64> {
    let ksize = g.kernel_h * g.kernel_w;
    let mut dw = vec![0.0; g.out_channels * g.in_channels * ksize];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let d = &dout[(n * g.out_channels + co) * out_plane..][..out_plane];
            for ci in 0..g.in_channels {
                let xp = &x[(n * g.in_channels + ci) * in_plane..][..in_plane];
                let dwk = &mut dw[(co * g.in_channels + ci) * ksize..][..ksize];
                for ky in 0..g.kernel_h {
                    let (oy_lo, oy_hi) = valid_range(g.out_h, g.in_h, ky, g.stride, g.pad);
                    for kx in 0..g.kernel_w {
                        let (ox_lo, ox_hi) = valid_range(g.out_w, g.in_w, kx, g.stride, g.pad);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let drow = &d[oy * g.out_w..][..g.out_w];
                            let xrow = &xp[iy * g.in_w..][..g.in_w];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.pad;
                                let dd = &drow[ox_lo..ox_hi];
                                acc += dd.iter().zip(&xrow[ix0..ix0 + dd.len()]).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += drow[ox] * xrow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        dwk[ky * g.kernel_w + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}

/// Gradient of the convolution with respect to its bias.
pub fn conv2d_backward_bias(g: &ConvGeometry, dout: &[f64]) -> Vec<f64> {
    let out_plane = g.out_h * g.out_w;
    let mut db = vec![0.0; g.out_channels];
    for n in 0..g.batch {
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dout[(n * g.out_channels + co) * out_plane..][..out_plane].iter().sum::<f64>();
        }
    }
    db
}

/// Non-overlapping `k`×`k` mean pooling of `[N, C, H, W]`.
pub fn avg_pool_forward(dims: [usize; 4], k: usize, x: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let xp = &x[plane * h * w..][..h * w];
        let op = &mut out[plane * oh * ow..][..oh * ow];
        for y in 0..h {
            for xx in 0..w {
                op[(y / k) * ow + xx / k] += xp[y * w + xx];
            }
        }
        op.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

pub fn avg_pool_backward(dims: [usize; 4], k: usize, dout: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let dp = &dout[plane * oh * ow..][..oh * ow];
        let xp = &mut dx[plane * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                xp[y * w + xx] = dp[(y / k) * ow + xx / k] * inv;
            }
        }
    }
    dx
}

//! Raw loops behind the convolution and upsampling graph ops.

use super::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 || kernels.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects C×H×W input and Co×Ci×k×k kernels, got {input:?} and {kernels:?}"
            )));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kc, k, k2) = (kernels[0], kernels[1], kernels[2], kernels[3]);
        if kc != c_in {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c_in}, kernels expect {kc}"
            )));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!("conv2d needs square odd kernels, got {k}×{k2}")));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::Shape(format!(
                "conv2d kernel {k} does not fit padded input {h}×{w} (padding {padding})"
            )));
        }
        // Output extents use floor division, the usual convention for strided convs.
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (w + 2 * padding - k) / stride + 1;
        Ok(Self {
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            padding,
            h_out,
            w_out,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.h_out, self.w_out]
    }
}

/// Output indices `lo..hi` whose input index `o*stride + off - pad` lands in `0..len`.
fn valid_range(off: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if off >= pad {
        0
    } else {
        (pad - off).div_ceil(stride)
    };
    // largest o with o*stride + off - pad <= len - 1
    let limit = len - 1 + pad;
    let hi = if limit < off {
        0
    } else {
        ((limit - off) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane_out = g.h_out * g.w_out;
    let plane_in = g.h * g.w;
    let mut out = vec![0.0; g.c_out * plane_out];
    for co in 0..g.c_out {
        let dst = &mut out[co * plane_out..(co + 1) * plane_out];
        dst.fill(bias[co]);
        for ci in 0..g.c_in {
            let src = &input[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(ky, g.padding, g.stride, g.h, g.h_out);
                for kx in 0..g.k {
                    let wv = kernels[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (ox_lo, ox_hi) = valid_range(kx, g.padding, g.stride, g.w, g.w_out);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                        for ox in ox_lo..ox_hi {
                            drow[ox] += wv * srow[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_kernels, grad_bias).
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane_out = g.h_out * g.w_out;
    let plane_in = g.h * g.w;
    let mut gi = vec![0.0; g.c_in * plane_in];
    let mut gk = vec![0.0; kernels.len()];
    let mut gb = vec![0.0; g.c_out];
    for co in 0..g.c_out {
        let go = &grad_out[co * plane_out..(co + 1) * plane_out];
        gb[co] = go.iter().sum();
        for ci in 0..g.c_in {
            let src = &input[ci * plane_in..(ci + 1) * plane_in];
            let gsrc = &mut gi[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.k {
                let (oy_lo, oy_hi) = valid_range(ky, g.padding, g.stride, g.h, g.h_out);
                for kx in 0..g.k {
                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wv = kernels[widx];
                    let (ox_lo, ox_hi) = valid_range(kx, g.padding, g.stride, g.w, g.w_out);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.padding;
                        let grow = &go[oy * g.w_out..(oy + 1) * g.w_out];
                        let base = iy * g.w + kx;
                        for ox in ox_lo..ox_hi {
                            let ii = base + ox * g.stride - g.padding;
                            acc += grow[ox] * src[ii];
                            gsrc[ii] += wv * grow[ox];
                        }
                    }
                    gk[widx] += acc;
                }
            }
        }
    }
    (gi, gk, gb)
}

/// Per-axis interpolation table: for each output index, (lower index, upper index, upper weight).
pub fn bilinear_table(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            // half-pixel centers, clamped at the border
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample_forward(input: &Array, h_out: usize, w_out: usize) -> Array {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ty = bilinear_table(h, h_out);
    let tx = bilinear_table(w, w_out);
    let src = input.data();
    let mut out = vec![0.0; c * h_out * w_out];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h_out * w_out..(ch + 1) * h_out * w_out];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                dst[oy * w_out + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    Array::new(vec![c, h_out, w_out], out).expect("upsample shape")
}

pub fn upsample_backward(in_shape: &[usize], grad_out: &Array) -> Array {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (h_out, w_out) = (grad_out.shape()[1], grad_out.shape()[2]);
    let ty = bilinear_table(h, h_out);
    let tx = bilinear_table(w, w_out);
    let go = grad_out.data();
    let mut gi = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut gi[ch * h * w..(ch + 1) * h * w];
        let src = &go[ch * h_out * w_out..(ch + 1) * h_out * w_out];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = src[oy * w_out + ox];
                plane[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                plane[y0 * w + x1] += g * (1.0 - ly) * lx;
                plane[y1 * w + x0] += g * ly * (1.0 - lx);
                plane[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    Array::new(in_shape.to_vec(), gi).expect("upsample grad shape")
}

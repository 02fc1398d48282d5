//! Raw convolution kernels on flat slices.
//!
//! Direct-loop cross-correlation arranged so the innermost loop walks a
//! contiguous output row; the stride-1 case reduces to slice axpy which the
//! compiler vectorizes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn infer(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (n, c, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(dim_err("conv2d", format!("input must be [N,C,H,W], got {:?}", input))),
        };
        let (o, wc, kh, kw) = match *weight {
            [o, wc, kh, kw] => (o, wc, kh, kw),
            _ => return Err(dim_err("conv2d", format!("weight must be [O,C,kh,kw], got {:?}", weight))),
        };
        if wc != c {
            return Err(dim_err(
                "conv2d",
                format!("channel axis: input C={} but weight C={}", c, wc),
            ));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(dim_err(
                "conv2d",
                format!("spatial axes: kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * padding, w + 2 * padding),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(Self { n, c, h, w, o, kh, kw, stride, padding, oh, ow })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.oh, self.ow]
    }
}

/// Output index range `lo..hi` for which `out * stride + k - pad` lands in `0..in_len`.
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if in_len + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv2d_forward(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::infer(input.shape(), weight.shape(), stride, padding)?;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * out_plane..][..out_plane];
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * in_plane..][..in_plane];
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = valid_range(ki, g.padding, g.stride, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = wt[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        let (ow_lo, ow_hi) = valid_range(kj, g.padding, g.stride, g.w, g.ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.padding;
                            let drow = &mut dst[oh * g.ow..][..g.ow];
                            let srow = &src[ih * g.w..][..g.w];
                            if g.stride == 1 {
                                let off = ow_lo + kj - g.padding;
                                let len = ow_hi - ow_lo;
                                for (d, s) in drow[ow_lo..ow_hi].iter_mut().zip(&srow[off..off + len]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    drow[ow] += wv * srow[ow * g.stride + kj - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(g.output_shape(), out)
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input(grad_out: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for n in 0..g.n {
        for o in 0..g.o {
            let gout = &grad_out[(n * g.o + o) * out_plane..][..out_plane];
            for c in 0..g.c {
                let dst = &mut dx[(n * g.c + c) * in_plane..][..in_plane];
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = valid_range(ki, g.padding, g.stride, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = weight[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        let (ow_lo, ow_hi) = valid_range(kj, g.padding, g.stride, g.w, g.ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.padding;
                            let grow = &gout[oh * g.ow..][..g.ow];
                            let drow = &mut dst[ih * g.w..][..g.w];
                            if g.stride == 1 {
                                let off = ow_lo + kj - g.padding;
                                let len = ow_hi - ow_lo;
                                for (d, s) in drow[off..off + len].iter_mut().zip(&grow[ow_lo..ow_hi]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    drow[ow * g.stride + kj - g.padding] += wv * grow[ow];
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

/// Gradient of the convolution with respect to its weight.
pub fn conv2d_backward_weight(grad_out: &[f64], input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dw = vec![0.0; g.o * g.c * g.kh * g.kw];
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for n in 0..g.n {
        for o in 0..g.o {
            let gout = &grad_out[(n * g.o + o) * out_plane..][..out_plane];
            for c in 0..g.c {
                let src = &input[(n * g.c + c) * in_plane..][..in_plane];
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = valid_range(ki, g.padding, g.stride, g.h, g.oh);
                    for kj in 0..g.kw {
                        let (ow_lo, ow_hi) = valid_range(kj, g.padding, g.stride, g.w, g.ow);
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.padding;
                            let grow = &gout[oh * g.ow..][..g.ow];
                            let srow = &src[ih * g.w..][..g.w];
                            if g.stride == 1 {
                                let off = ow_lo + kj - g.padding;
                                let len = ow_hi.saturating_sub(ow_lo);
                                for (a, b) in grow[ow_lo..ow_lo + len].iter().zip(&srow[off..off + len]) {
                                    acc += a * b;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    acc += grow[ow] * srow[ow * g.stride + kj - g.padding];
                                }
                            }
                        }
                        dw[((o * g.c + c) * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    dw
}

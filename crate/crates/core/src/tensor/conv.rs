//! Spatial kernels: same-style cross-correlation, 2x2 stride-2 transposed
//! convolution and 2x2 max pooling, all on `[C x H x W]` row-major planes.
//!
//! Inner loops run over contiguous row segments so they vectorize; the outer
//! loop over output planes is split across the rayon pool when the plane
//! work is large enough to pay for it. Each output element is always
//! reduced in the same order, so results do not depend on thread count.

use rayon::prelude::*;

use super::{Float, Op, Tensor};
use crate::error::{Error, Result};

const PAR_THRESHOLD: usize = 1 << 16;

fn for_each_plane<T: Float>(out: &mut [T], plane: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    } else {
        out.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    /// Output rows `y` whose tap `ky` lands inside the input.
    #[inline]
    fn rows(&self, ky: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(ky);
        let hi = (self.h + self.pad).saturating_sub(ky).min(self.oh);
        (lo, hi)
    }

    #[inline]
    fn cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo, hi)
    }

    fn work(&self) -> usize {
        self.c_in * self.c_out * self.k * self.k * self.oh * self.ow
    }
}

pub(crate) fn conv2d_forward<T: Float>(input: &[T], kernel: &[T], bias: &[T], g: &ConvGeometry) -> Vec<T> {
    let (h, w, k, pad, ow) = (g.h, g.w, g.k, g.pad, g.ow);
    let mut out = vec![T::zero(); g.c_out * g.oh * g.ow];
    for_each_plane(&mut out, g.oh * g.ow, g.work(), |co, plane| {
        plane.fill(bias[co]);
        for ci in 0..g.c_in {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = g.rows(ky);
                for kx in 0..k {
                    let (x0, x1) = g.cols(kx);
                    if y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    let wv = kernel[((co * g.c_in + ci) * k + ky) * k + kx];
                    let sx = x0 + kx - pad;
                    for y in y0..y1 {
                        let iy = y + ky - pad;
                        let dst = &mut plane[y * ow + x0..y * ow + x1];
                        let row = &src[iy * w + sx..iy * w + sx + (x1 - x0)];
                        for (o, &i) in dst.iter_mut().zip(row) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_grad_input<T: Float>(grad: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let (h, w, k, pad, oh, ow) = (g.h, g.w, g.k, g.pad, g.oh, g.ow);
    let mut gi = vec![T::zero(); g.c_in * h * w];
    for_each_plane(&mut gi, h * w, g.work(), |ci, plane| {
        for co in 0..g.c_out {
            let gout = &grad[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..k {
                let (y0, y1) = g.rows(ky);
                for kx in 0..k {
                    let (x0, x1) = g.cols(kx);
                    if y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    let wv = kernel[((co * g.c_in + ci) * k + ky) * k + kx];
                    let sx = x0 + kx - pad;
                    for y in y0..y1 {
                        let iy = y + ky - pad;
                        let dst = &mut plane[iy * w + sx..iy * w + sx + (x1 - x0)];
                        let row = &gout[y * ow + x0..y * ow + x1];
                        for (d, &v) in dst.iter_mut().zip(row) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    });
    gi
}

pub(crate) fn conv2d_grad_kernel<T: Float>(grad: &[T], input: &[T], g: &ConvGeometry) -> Vec<T> {
    let (h, w, k, pad, oh, ow) = (g.h, g.w, g.k, g.pad, g.oh, g.ow);
    let per_co = g.c_in * k * k;
    let mut gk = vec![T::zero(); g.c_out * per_co];
    for_each_plane(&mut gk, per_co, g.work(), |co, block| {
        let gout = &grad[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = g.rows(ky);
                for kx in 0..k {
                    let (x0, x1) = g.cols(kx);
                    if y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    let sx = x0 + kx - pad;
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let iy = y + ky - pad;
                        let a = &gout[y * ow + x0..y * ow + x1];
                        let b = &src[iy * w + sx..iy * w + sx + (x1 - x0)];
                        acc += dot(a, b);
                    }
                    block[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    gk
}

pub(crate) fn conv2d_grad_bias<T: Float>(grad: &[T], g: &ConvGeometry) -> Vec<T> {
    grad.chunks(g.oh * g.ow).map(|p| p.iter().copied().sum()).collect()
}

/// Dot product with four independent accumulators so the reduction vectorizes.
#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TransposeGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
}

impl TransposeGeometry {
    fn work(&self) -> usize {
        self.c_in * self.c_out * 4 * self.h * self.w
    }
}

pub(crate) fn conv_transpose2d_forward<T: Float>(input: &[T], kernel: &[T], g: &TransposeGeometry) -> Vec<T> {
    let (h, w) = (g.h, g.w);
    let ow = 2 * w;
    let mut out = vec![T::zero(); g.c_out * 4 * h * w];
    for_each_plane(&mut out, 4 * h * w, g.work(), |co, plane| {
        for ci in 0..g.c_in {
            let src = &input[ci * h * w..(ci + 1) * h * w];
            let kk = &kernel[(ci * g.c_out + co) * 4..(ci * g.c_out + co) * 4 + 4];
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                for ky in 0..2 {
                    let dst = &mut plane[(2 * y + ky) * ow..(2 * y + ky + 1) * ow];
                    let (k0, k1) = (kk[2 * ky], kk[2 * ky + 1]);
                    for (pair, &v) in dst.chunks_exact_mut(2).zip(row) {
                        pair[0] += k0 * v;
                        pair[1] += k1 * v;
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv_transpose2d_grad_input<T: Float>(grad: &[T], kernel: &[T], g: &TransposeGeometry) -> Vec<T> {
    let (h, w) = (g.h, g.w);
    let ow = 2 * w;
    let mut gi = vec![T::zero(); g.c_in * h * w];
    for_each_plane(&mut gi, h * w, g.work(), |ci, plane| {
        for co in 0..g.c_out {
            let gout = &grad[co * 4 * h * w..(co + 1) * 4 * h * w];
            let kk = &kernel[(ci * g.c_out + co) * 4..(ci * g.c_out + co) * 4 + 4];
            for y in 0..h {
                let dst = &mut plane[y * w..(y + 1) * w];
                for ky in 0..2 {
                    let row = &gout[(2 * y + ky) * ow..(2 * y + ky + 1) * ow];
                    let (k0, k1) = (kk[2 * ky], kk[2 * ky + 1]);
                    for (d, pair) in dst.iter_mut().zip(row.chunks_exact(2)) {
                        *d += k0 * pair[0] + k1 * pair[1];
                    }
                }
            }
        }
    });
    gi
}

pub(crate) fn conv_transpose2d_grad_kernel<T: Float>(grad: &[T], input: &[T], g: &TransposeGeometry) -> Vec<T> {
    let (h, w) = (g.h, g.w);
    let ow = 2 * w;
    let mut gk = vec![T::zero(); g.c_in * g.c_out * 4];
    for_each_plane(&mut gk, g.c_out * 4, g.work(), |ci, block| {
        let src = &input[ci * h * w..(ci + 1) * h * w];
        for co in 0..g.c_out {
            let gout = &grad[co * 4 * h * w..(co + 1) * 4 * h * w];
            let mut acc = [T::zero(); 4];
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                for ky in 0..2 {
                    let grow = &gout[(2 * y + ky) * ow..(2 * y + ky + 1) * ow];
                    for (&v, pair) in row.iter().zip(grow.chunks_exact(2)) {
                        acc[2 * ky] += v * pair[0];
                        acc[2 * ky + 1] += v * pair[1];
                    }
                }
            }
            block[co * 4..co * 4 + 4].copy_from_slice(&acc);
        }
    });
    gk
}

fn chw(op: &'static str, t: &Tensor<impl Float>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, format!("expected [C x H x W], got {:?}", t.shape()))),
    }
}

impl<T: Float> Tensor<T> {
    /// Cross-correlation of a `[C_in x H x W]` input with `[C_out x C_in x k x k]`
    /// kernels plus a per-channel bias, with `padding` zero pixels on every side.
    /// Stride is 1, so `padding = (k - 1) / 2` preserves the spatial size.
    pub fn conv2d(&self, kernel: &Tensor<T>, bias: &Tensor<T>, padding: usize) -> Result<Tensor<T>> {
        let (c_in, h, w) = chw("conv2d", self)?;
        let (c_out, kc, k) = match *kernel.shape() {
            [co, ci, kh, kw] if kh == kw => (co, ci, kh),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernels must be [C_out x C_in x k x k], got {:?}", kernel.shape()),
                ))
            }
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{c_out}], got {:?}", bias.shape()),
            ));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("{k}x{k} kernel larger than padded {h}x{w} input (padding {padding})"),
            ));
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k,
            pad: padding,
            oh: h + 2 * padding - k + 1,
            ow: w + 2 * padding - k + 1,
        };
        let data = conv2d_forward(self.data(), kernel.data(), bias.data(), &geom);
        Ok(Tensor::from_op(
            vec![c_out, geom.oh, geom.ow],
            data,
            Op::Conv2d {
                input: self.clone(),
                kernel: kernel.clone(),
                bias: bias.clone(),
                geom,
            },
        ))
    }

    /// Stride-2 transposed convolution with `[C_in x C_out x 2 x 2]` kernels; doubles H and W.
    pub fn conv_transpose2d(&self, kernel: &Tensor<T>) -> Result<Tensor<T>> {
        let (c_in, h, w) = chw("conv_transpose2d", self)?;
        let c_out = match *kernel.shape() {
            [ci, co, 2, 2] if ci == c_in => co,
            _ => {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("kernels must be [{c_in} x C_out x 2 x 2], got {:?}", kernel.shape()),
                ))
            }
        };
        let geom = TransposeGeometry { c_in, h, w, c_out };
        let data = conv_transpose2d_forward(self.data(), kernel.data(), &geom);
        Ok(Tensor::from_op(
            vec![c_out, 2 * h, 2 * w],
            data,
            Op::ConvTranspose2d {
                input: self.clone(),
                kernel: kernel.clone(),
                geom,
            },
        ))
    }

    /// 2x2 max pooling with stride 2. Backward routes each window's gradient to
    /// the first maximal element in row-major scan order.
    pub fn maxpool2d(&self) -> Result<Tensor<T>> {
        let (c, h, w) = chw("maxpool2d", self)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data();
        let mut values = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * x + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    values.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, oh, ow],
            values,
            Op::MaxPool2d {
                input: self.clone(),
                argmax,
            },
        ))
    }
}

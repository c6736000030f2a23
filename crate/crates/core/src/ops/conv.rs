//! Stride-1 2D cross-correlation via im2col + GEMM.

use rayon::prelude::*;

use super::{check_upstream, Backward, GradPair};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1 unpadded kernels read the input directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dBackward<T: Real> {
    input: Tensor<T>,
    weights: Tensor<T>,
    geo: Geometry,
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<T: Real> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Cross-correlation (no kernel flip), stride 1, zero padding `padding` on
/// every side. `weights` is `(out_c, in_c, kh, kw)`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    padding: usize,
) -> Result<GradPair<T, Conv2dBackward<T>>> {
    let [out_c, in_c, kh, kw] = weights.shape();
    if input.c() != in_c {
        return Err(Error::shape("conv2d", "input channels", in_c, input.c()));
    }
    if bias.len() != out_c {
        return Err(Error::shape("conv2d", "bias length", out_c, bias.len()));
    }
    let (h, w) = (input.h(), input.w());
    if h + 2 * padding < kh {
        return Err(Error::shape("conv2d", "padded height", kh, h + 2 * padding));
    }
    if w + 2 * padding < kw {
        return Err(Error::shape("conv2d", "padded width", kw, w + 2 * padding));
    }
    let geo = Geometry {
        in_c,
        h,
        w,
        out_c,
        kh,
        kw,
        pad: padding,
        out_h: h + 2 * padding - kh + 1,
        out_w: w + 2 * padding - kw + 1,
    };

    let n = input.n();
    let mut out = Tensor::zeros([n, out_c, geo.out_h, geo.out_w]);
    let out_len = out_c * geo.out_plane();
    if out_len > 0 {
        out.data_mut()
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each(|(i, dst)| forward_sample(&geo, input.sample(i), weights.data(), bias, dst));
    }

    Ok(GradPair {
        value: out,
        backward: Conv2dBackward {
            input: input.clone(),
            weights: weights.clone(),
            geo,
        },
    })
}

fn forward_sample<T: Real>(geo: &Geometry, x: &[T], weights: &[T], bias: &[T], dst: &mut [T]) {
    let plane = geo.out_plane();
    for (co, row) in dst.chunks_mut(plane).enumerate() {
        row.fill(bias[co]);
    }
    let k = geo.patch_len();
    let owned;
    let col: &[T] = if geo.is_pointwise() {
        x
    } else {
        owned = im2col(geo, x);
        &owned
    };
    T::gemm(geo.out_c, k, plane, T::one(), weights, (k, 1), col, (plane, 1), T::one(), dst, (plane, 1));
}

/// Unfolds one sample into a `(in_c*kh*kw, out_h*out_w)` matrix.
fn im2col<T: Real>(geo: &Geometry, x: &[T]) -> Vec<T> {
    let plane = geo.out_plane();
    let mut col = vec![T::zero(); geo.patch_len() * plane];
    let pad = geo.pad as isize;
    let mut row = 0;
    for ci in 0..geo.in_c {
        let src = &x[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dx = kj as isize - pad;
                let (lo, hi) = valid_range(dx, geo.w, geo.out_w);
                for oh in 0..geo.out_h {
                    let ih = oh as isize + ki as isize - pad;
                    if ih < 0 || ih >= geo.h as isize || lo >= hi {
                        continue;
                    }
                    let ih = ih as usize;
                    let s = (ih * geo.w) as isize + lo as isize + dx;
                    let s = s as usize;
                    dst[oh * geo.out_w + lo..oh * geo.out_w + hi].copy_from_slice(&src[s..s + (hi - lo)]);
                }
                row += 1;
            }
        }
    }
    col
}

/// Output columns `[lo, hi)` whose source column `ow + dx` lies in `[0, w)`.
fn valid_range(dx: isize, w: usize, out_w: usize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, out_w as isize) as usize;
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatters-adds columns back into image layout.
fn col2im<T: Real>(geo: &Geometry, col: &[T], dx_out: &mut [T]) {
    let plane = geo.out_plane();
    let pad = geo.pad as isize;
    let mut row = 0;
    for ci in 0..geo.in_c {
        let dst = &mut dx_out[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let src = &col[row * plane..(row + 1) * plane];
                let dx = kj as isize - pad;
                let (lo, hi) = valid_range(dx, geo.w, geo.out_w);
                for oh in 0..geo.out_h {
                    let ih = oh as isize + ki as isize - pad;
                    if ih < 0 || ih >= geo.h as isize || lo >= hi {
                        continue;
                    }
                    let s = (ih as usize * geo.w) as isize + lo as isize + dx;
                    let s = s as usize;
                    for (d, &v) in dst[s..s + (hi - lo)]
                        .iter_mut()
                        .zip(&src[oh * geo.out_w + lo..oh * geo.out_w + hi])
                    {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

impl<T: Real> Backward<T> for Conv2dBackward<T> {
    type Grads = Conv2dGrads<T>;

    fn backward(&self, upstream: &Tensor<T>) -> Result<Conv2dGrads<T>> {
        let geo = self.geo;
        let n = self.input.n();
        check_upstream("conv2d", [n, geo.out_c, geo.out_h, geo.out_w], upstream)?;

        let plane = geo.out_plane();
        let k = geo.patch_len();
        let in_len = geo.in_c * geo.h * geo.w;
        let mut grad_input = Tensor::zeros(self.input.shape());

        // Per-sample weight gradients are summed afterwards in sample order so
        // the result does not depend on scheduling.
        let partials: Vec<Vec<T>> = if in_len == 0 {
            vec![vec![T::zero(); geo.out_c * k]; n]
        } else {
            grad_input
                .data_mut()
                .par_chunks_mut(in_len)
                .enumerate()
                .map(|(i, dx)| {
                    let dy = upstream.sample(i);
                    let x = self.input.sample(i);
                    let mut dw = vec![T::zero(); geo.out_c * k];
                    if geo.is_pointwise() {
                        T::gemm(geo.out_c, plane, k, T::one(), dy, (plane, 1), x, (1, plane), T::zero(), &mut dw, (k, 1));
                        T::gemm(
                            k,
                            geo.out_c,
                            plane,
                            T::one(),
                            self.weights.data(),
                            (1, k),
                            dy,
                            (plane, 1),
                            T::zero(),
                            dx,
                            (plane, 1),
                        );
                    } else {
                        let col = im2col(&geo, x);
                        T::gemm(geo.out_c, plane, k, T::one(), dy, (plane, 1), &col, (1, plane), T::zero(), &mut dw, (k, 1));
                        let mut dcol = col;
                        T::gemm(
                            k,
                            geo.out_c,
                            plane,
                            T::one(),
                            self.weights.data(),
                            (1, k),
                            dy,
                            (plane, 1),
                            T::zero(),
                            &mut dcol,
                            (plane, 1),
                        );
                        col2im(&geo, &dcol, dx);
                    }
                    dw
                })
                .collect()
        };

        let mut grad_w = Tensor::zeros(self.weights.shape());
        for dw in &partials {
            for (g, &v) in grad_w.data_mut().iter_mut().zip(dw) {
                *g += v;
            }
        }

        let mut grad_b = vec![T::zero(); geo.out_c];
        for i in 0..n {
            for (co, gb) in grad_b.iter_mut().enumerate() {
                let row = &upstream.sample(i)[co * plane..(co + 1) * plane];
                for &v in row {
                    *gb += v;
                }
            }
        }

        Ok(Conv2dGrads {
            input: grad_input,
            weights: grad_w,
            bias: grad_b,
        })
    }
}

//! 2-D convolution kernels (im2col + GEMM) with hand-derived backward passes.
//!
//! Weights are stored as `[out_c, in_c, kh, kw]` reusing `Shape`'s NCHW
//! fields; biases as `[1, out_c, 1, 1]`. Padding is zero-padding.

use super::data::{Shape, TensorData};
use super::scalar::Scalar;
use crate::error::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvSpec { stride, padding, dilation }
    }

    /// Plain stride-1 conv with `same` padding for odd kernels.
    pub fn same(kernel: usize) -> Self {
        ConvSpec { stride: 1, padding: kernel / 2, dilation: 1 }
    }

    pub fn out_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let eff = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < eff {
            return None;
        }
        Some((padded - eff) / self.stride + 1)
    }

    pub fn out_shape(&self, x: Shape, w: Shape) -> Result<Shape, TensorError> {
        if x.c != w.c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {} channels, weight expects {}", x.c, w.c),
            });
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(TensorError::Invalid("conv stride/dilation must be >= 1".into()));
        }
        let oh = self.out_dim(x.h, w.h);
        let ow = self.out_dim(x.w, w.w);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(Shape::new(x.n, w.n, oh, ow)),
            _ => Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {}x{} does not fit input {} with {:?}", w.h, w.w, x, self),
            }),
        }
    }
}

/// Unfold one image `[c,h,w]` into a column matrix `[c*kh*kw, oh*ow]`.
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in out_row.iter_mut() {
                            *v = T::ZERO;
                        }
                        continue;
                    }
                    let src_row = &plane[(iy as usize) * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        *v = if ix < 0 || ix >= w as isize { T::ZERO } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back into an image (adjoint of `im2col`).
fn col2im_add<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[(iy as usize) * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, v) in src_row.iter().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &TensorData<T>,
    weight: &TensorData<T>,
    bias: Option<&TensorData<T>>,
    spec: ConvSpec,
) -> Result<TensorData<T>, TensorError> {
    let out_shape = spec.out_shape(x.shape, weight.shape)?;
    let (oc, ic, kh, kw) = (weight.shape.n, weight.shape.c, weight.shape.h, weight.shape.w);
    if let Some(b) = bias {
        if b.shape != Shape::new(1, oc, 1, 1) {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {} does not match {} output channels", b.shape, oc),
            });
        }
    }
    let (oh, ow) = (out_shape.h, out_shape.w);
    let k = ic * kh * kw;
    let span = oh * ow;
    let mut out = TensorData::zeros(out_shape);
    let mut col = vec![T::ZERO; k * span];
    for n in 0..x.shape.n {
        let xi = &x.data[n * ic * x.shape.h * x.shape.w..(n + 1) * ic * x.shape.h * x.shape.w];
        im2col(xi, ic, x.shape.h, x.shape.w, kh, kw, spec, oh, ow, &mut col);
        let oi = &mut out.data[n * oc * span..(n + 1) * oc * span];
        // [oc, k] x [k, span] -> [oc, span]
        T::gemm(
            oc,
            k,
            span,
            T::ONE,
            &weight.data,
            k as isize,
            1,
            &col,
            span as isize,
            1,
            T::ZERO,
            oi,
            span as isize,
            1,
        );
        if let Some(b) = bias {
            for c in 0..oc {
                let bv = b.data[c];
                for v in &mut oi[c * span..(c + 1) * span] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T: Scalar> {
    pub dx: Option<TensorData<T>>,
    pub dw: Option<TensorData<T>>,
    pub db: Option<TensorData<T>>,
}

/// Backward pass. `dy` has the forward output shape; each gradient is
/// computed only when its `want_*` flag is set (first-layer convs feed on
/// constant images, so `dx` there is wasted work).
pub fn conv2d_backward<T: Scalar>(
    x: &TensorData<T>,
    weight: &TensorData<T>,
    dy: &TensorData<T>,
    spec: ConvSpec,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> Result<ConvGrads<T>, TensorError> {
    let out_shape = spec.out_shape(x.shape, weight.shape)?;
    if dy.shape != out_shape {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            detail: format!("dy shape {} does not match forward output {}", dy.shape, out_shape),
        });
    }
    let (oc, ic, kh, kw) = (weight.shape.n, weight.shape.c, weight.shape.h, weight.shape.w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let k = ic * kh * kw;
    let span = oh * ow;

    let mut dx = want_dx.then(|| TensorData::zeros(x.shape));
    let mut dw = want_dw.then(|| TensorData::zeros(weight.shape));
    let mut db = want_db.then(|| TensorData::zeros(Shape::new(1, oc, 1, 1)));

    let mut col = vec![T::ZERO; if want_dw { k * span } else { 0 }];
    let mut dcol = vec![T::ZERO; if want_dx { k * span } else { 0 }];
    for n in 0..x.shape.n {
        let xi = &x.data[n * ic * x.shape.h * x.shape.w..(n + 1) * ic * x.shape.h * x.shape.w];
        let dyi = &dy.data[n * oc * span..(n + 1) * oc * span];

        if let Some(dw) = dw.as_mut() {
            // dW += dY [oc, span] x col^T [span, k]
            im2col(xi, ic, x.shape.h, x.shape.w, kh, kw, spec, oh, ow, &mut col);
            T::gemm(
                oc,
                span,
                k,
                T::ONE,
                dyi,
                span as isize,
                1,
                &col,
                1,
                span as isize,
                T::ONE,
                &mut dw.data,
                k as isize,
                1,
            );
        }

        if let Some(dx) = dx.as_mut() {
            // dcol = W^T [k, oc] x dY [oc, span]; scatter back into dx.
            T::gemm(
                k,
                oc,
                span,
                T::ONE,
                &weight.data,
                1,
                k as isize,
                dyi,
                span as isize,
                1,
                T::ZERO,
                &mut dcol,
                span as isize,
                1,
            );
            let dxi =
                &mut dx.data[n * ic * x.shape.h * x.shape.w..(n + 1) * ic * x.shape.h * x.shape.w];
            col2im_add(&dcol, ic, x.shape.h, x.shape.w, kh, kw, spec, oh, ow, dxi);
        }

        if let Some(db) = db.as_mut() {
            for c in 0..oc {
                let mut s = T::ZERO;
                for v in &dyi[c * span..(c + 1) * span] {
                    s += *v;
                }
                db.data[c] += s;
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

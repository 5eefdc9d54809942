//! Spatial x2 upsampling kernels: plain bilinear and learned convex
//! combination (softmax-weighted 3x3 neighborhoods per sub-pixel).

use super::data::{Shape, TensorData};
use super::scalar::Scalar;
use crate::error::TensorError;

/// Source coordinate for an output pixel under half-pixel alignment.
#[inline]
fn src_coord(out: usize) -> f64 {
    (out as f64 + 0.5) / 2.0 - 0.5
}

#[inline]
fn taps(pos: f64, extent: usize) -> (usize, usize, f64) {
    let max = (extent - 1) as f64;
    let p = pos.clamp(0.0, max);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, p - i0 as f64)
}

pub fn bilinear_up2_forward<T: Scalar>(x: &TensorData<T>) -> TensorData<T> {
    let s = x.shape;
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = TensorData::zeros(os);
    for oy in 0..os.h {
        let (y0, y1, wy) = taps(src_coord(oy), s.h);
        let (wy, iy) = (T::from_f64(wy), T::from_f64(1.0 - wy));
        for ox in 0..os.w {
            let (x0, x1, wx) = taps(src_coord(ox), s.w);
            let (wx, ix) = (T::from_f64(wx), T::from_f64(1.0 - wx));
            for n in 0..s.n {
                for c in 0..s.c {
                    let v = iy * (ix * x.at(n, c, y0, x0) + wx * x.at(n, c, y0, x1))
                        + wy * (ix * x.at(n, c, y1, x0) + wx * x.at(n, c, y1, x1));
                    *out.at_mut(n, c, oy, ox) = v;
                }
            }
        }
    }
    out
}

pub fn bilinear_up2_backward<T: Scalar>(input_shape: Shape, dy: &TensorData<T>) -> TensorData<T> {
    let s = input_shape;
    let mut dx = TensorData::zeros(s);
    for oy in 0..dy.shape.h {
        let (y0, y1, wy) = taps(src_coord(oy), s.h);
        let (wy, iy) = (T::from_f64(wy), T::from_f64(1.0 - wy));
        for ox in 0..dy.shape.w {
            let (x0, x1, wx) = taps(src_coord(ox), s.w);
            let (wx, ix) = (T::from_f64(wx), T::from_f64(1.0 - wx));
            for n in 0..s.n {
                for c in 0..s.c {
                    let g = dy.at(n, c, oy, ox);
                    *dx.at_mut(n, c, y0, x0) += g * iy * ix;
                    *dx.at_mut(n, c, y0, x1) += g * iy * wx;
                    *dx.at_mut(n, c, y1, x0) += g * wy * ix;
                    *dx.at_mut(n, c, y1, x1) += g * wy * wx;
                }
            }
        }
    }
    dx
}

/// Per-(cell, sub-pixel) softmax weights over the 3x3 coarse neighborhood.
/// `logits` is `[n, 36, h, w]` with channel `sub * 9 + m`, sub-pixel index
/// `sub = 2*dy + dx` over the 2x2 block and neighbor index `m` row-major over
/// `dy,dx in {-1,0,1}`. Border neighborhoods clamp to the image.
fn check_convex_shapes(coarse: Shape, logits: Shape) -> Result<(), TensorError> {
    if logits.n != coarse.n || logits.c != 36 || logits.h != coarse.h || logits.w != coarse.w {
        return Err(TensorError::ShapeMismatch {
            op: "convex_up2",
            detail: format!("coarse {} with logits {} (want [n,36,h,w])", coarse, logits),
        });
    }
    Ok(())
}

#[inline]
fn softmax9<T: Scalar>(logits: &TensorData<T>, n: usize, sub: usize, y: usize, x: usize) -> [f64; 9] {
    let mut v = [0.0f64; 9];
    let mut max = f64::NEG_INFINITY;
    for (m, vm) in v.iter_mut().enumerate() {
        *vm = logits.at(n, sub * 9 + m, y, x).to_f64();
        if *vm > max {
            max = *vm;
        }
    }
    let mut sum = 0.0;
    for vm in v.iter_mut() {
        *vm = (*vm - max).exp();
        sum += *vm;
    }
    for vm in v.iter_mut() {
        *vm /= sum;
    }
    v
}

#[inline]
fn neighbor(y: usize, x: usize, m: usize, h: usize, w: usize) -> (usize, usize) {
    let dy = (m / 3) as isize - 1;
    let dx = (m % 3) as isize - 1;
    let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
    let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
    (ny, nx)
}

/// Upsample a coarse field x2. Values are doubled on the way up, matching
/// the convention for displacement fields whose units are pixels at the
/// output resolution.
pub fn convex_up2_forward<T: Scalar>(
    coarse: &TensorData<T>,
    logits: &TensorData<T>,
) -> Result<TensorData<T>, TensorError> {
    check_convex_shapes(coarse.shape, logits.shape)?;
    let s = coarse.shape;
    let mut out = TensorData::zeros(Shape::new(s.n, s.c, s.h * 2, s.w * 2));
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                for sub in 0..4 {
                    let sm = softmax9(logits, n, sub, y, x);
                    let (oy, ox) = (2 * y + sub / 2, 2 * x + sub % 2);
                    for c in 0..s.c {
                        let mut acc = 0.0;
                        for (m, w_m) in sm.iter().enumerate() {
                            let (ny, nx) = neighbor(y, x, m, s.h, s.w);
                            acc += w_m * coarse.at(n, c, ny, nx).to_f64();
                        }
                        *out.at_mut(n, c, oy, ox) = T::from_f64(2.0 * acc);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvexUpGrads<T: Scalar> {
    pub dcoarse: TensorData<T>,
    pub dlogits: TensorData<T>,
}

pub fn convex_up2_backward<T: Scalar>(
    coarse: &TensorData<T>,
    logits: &TensorData<T>,
    dy: &TensorData<T>,
) -> Result<ConvexUpGrads<T>, TensorError> {
    check_convex_shapes(coarse.shape, logits.shape)?;
    let s = coarse.shape;
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    if dy.shape != os {
        return Err(TensorError::ShapeMismatch {
            op: "convex_up2_backward",
            detail: format!("dy shape {} does not match output {}", dy.shape, os),
        });
    }
    let mut dcoarse = TensorData::zeros(s);
    let mut dlogits = TensorData::zeros(logits.shape);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                for sub in 0..4 {
                    let sm = softmax9(logits, n, sub, y, x);
                    let (oy, ox) = (2 * y + sub / 2, 2 * x + sub % 2);
                    // weighted[m] = sum_c g[c] * coarse_m[c]; inner = sum over
                    // m of s_m * weighted[m] (the softmax-Jacobian dot).
                    let mut weighted = [0.0f64; 9];
                    for (m, wm) in weighted.iter_mut().enumerate() {
                        let (ny, nx) = neighbor(y, x, m, s.h, s.w);
                        let mut acc = 0.0;
                        for c in 0..s.c {
                            acc += dy.at(n, c, oy, ox).to_f64() * coarse.at(n, c, ny, nx).to_f64();
                        }
                        *wm = acc;
                    }
                    let inner: f64 = sm.iter().zip(&weighted).map(|(a, b)| a * b).sum();
                    for m in 0..9 {
                        let (ny, nx) = neighbor(y, x, m, s.h, s.w);
                        for c in 0..s.c {
                            let g = dy.at(n, c, oy, ox).to_f64();
                            *dcoarse.at_mut(n, c, ny, nx) += T::from_f64(2.0 * g * sm[m]);
                        }
                        *dlogits.at_mut(n, sub * 9 + m, y, x) +=
                            T::from_f64(2.0 * sm[m] * (weighted[m] - inner));
                    }
                }
            }
        }
    }
    Ok(ConvexUpGrads { dcoarse, dlogits })
}

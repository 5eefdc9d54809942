//! Differentiable backward warping with bilinear sampling.
//!
//! `warp(src, flow)` samples `src` at `p + flow(p)` for every output pixel
//! `p`. Flow is `[n,2,h,w]` with channel 0 = horizontal displacement (+x
//! right) and channel 1 = vertical (+y down), in pixels. Sample positions are
//! clamped to the image border, so out-of-range reads replicate edge pixels
//! and their gradient with respect to the flow saturates to zero.

use super::data::{Shape, TensorData};
use super::scalar::Scalar;
use crate::error::TensorError;

fn check_shapes(src: Shape, flow: Shape, op: &'static str) -> Result<(), TensorError> {
    if flow.c != 2 || flow.n != src.n || flow.h != src.h || flow.w != src.w {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("src {} with flow {} (want [n,2,h,w] matching src)", src, flow),
        });
    }
    Ok(())
}

struct Sample {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    /// False where the clamp saturated, i.e. flow gradient is zero.
    live_x: bool,
    live_y: bool,
}

#[inline]
fn resolve(pos: f64, extent: usize) -> (usize, usize, f64, bool) {
    let max = (extent - 1) as f64;
    let live = pos > 0.0 && pos < max;
    let p = pos.clamp(0.0, max);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, p - i0 as f64, live)
}

#[inline]
fn sample_at<T: Scalar>(flow: &TensorData<T>, n: usize, y: usize, x: usize) -> Sample {
    let shape = flow.shape;
    let sx = x as f64 + flow.at(n, 0, y, x).to_f64();
    let sy = y as f64 + flow.at(n, 1, y, x).to_f64();
    let (x0, x1, wx, live_x) = resolve(sx, shape.w);
    let (y0, y1, wy, live_y) = resolve(sy, shape.h);
    Sample { x0, y0, x1, y1, wx, wy, live_x, live_y }
}

pub fn warp_forward<T: Scalar>(
    src: &TensorData<T>,
    flow: &TensorData<T>,
) -> Result<TensorData<T>, TensorError> {
    check_shapes(src.shape, flow.shape, "warp")?;
    let s = src.shape;
    let mut out = TensorData::zeros(s);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let sm = sample_at(flow, n, y, x);
                let (wx, wy) = (T::from_f64(sm.wx), T::from_f64(sm.wy));
                let (ix, iy) = (T::ONE - wx, T::ONE - wy);
                for c in 0..s.c {
                    let v00 = src.at(n, c, sm.y0, sm.x0);
                    let v01 = src.at(n, c, sm.y0, sm.x1);
                    let v10 = src.at(n, c, sm.y1, sm.x0);
                    let v11 = src.at(n, c, sm.y1, sm.x1);
                    *out.at_mut(n, c, y, x) =
                        iy * (ix * v00 + wx * v01) + wy * (ix * v10 + wx * v11);
                }
            }
        }
    }
    Ok(out)
}

pub struct WarpGrads<T: Scalar> {
    pub dsrc: TensorData<T>,
    pub dflow: TensorData<T>,
}

pub fn warp_backward<T: Scalar>(
    src: &TensorData<T>,
    flow: &TensorData<T>,
    dy: &TensorData<T>,
) -> Result<WarpGrads<T>, TensorError> {
    check_shapes(src.shape, flow.shape, "warp_backward")?;
    let s = src.shape;
    if dy.shape != s {
        return Err(TensorError::ShapeMismatch {
            op: "warp_backward",
            detail: format!("dy shape {} does not match src {}", dy.shape, s),
        });
    }
    let mut dsrc = TensorData::zeros(s);
    let mut dflow = TensorData::zeros(flow.shape);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let sm = sample_at(flow, n, y, x);
                let (wx, wy) = (T::from_f64(sm.wx), T::from_f64(sm.wy));
                let (ix, iy) = (T::ONE - wx, T::ONE - wy);
                let mut gx = T::ZERO;
                let mut gy = T::ZERO;
                for c in 0..s.c {
                    let g = dy.at(n, c, y, x);
                    *dsrc.at_mut(n, c, sm.y0, sm.x0) += g * iy * ix;
                    *dsrc.at_mut(n, c, sm.y0, sm.x1) += g * iy * wx;
                    *dsrc.at_mut(n, c, sm.y1, sm.x0) += g * wy * ix;
                    *dsrc.at_mut(n, c, sm.y1, sm.x1) += g * wy * wx;
                    let v00 = src.at(n, c, sm.y0, sm.x0);
                    let v01 = src.at(n, c, sm.y0, sm.x1);
                    let v10 = src.at(n, c, sm.y1, sm.x0);
                    let v11 = src.at(n, c, sm.y1, sm.x1);
                    // d out / d sx and / d sy of the bilinear blend.
                    gx += g * (iy * (v01 - v00) + wy * (v11 - v10));
                    gy += g * (ix * (v10 - v00) + wx * (v11 - v01));
                }
                if sm.live_x {
                    *dflow.at_mut(n, 0, y, x) = gx;
                }
                if sm.live_y {
                    *dflow.at_mut(n, 1, y, x) = gy;
                }
            }
        }
    }
    Ok(WarpGrads { dsrc, dflow })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> TensorData<f64> {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        TensorData::from_vec(shape, data).unwrap()
    }

    #[test]
    fn zero_flow_is_bit_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random_tensor(&mut rng, Shape::new(2, 3, 7, 6), -2.0, 2.0);
        let flow = TensorData::zeros(Shape::new(2, 2, 7, 6));
        let out = warp_forward(&src, &flow).unwrap();
        assert_eq!(out.data, src.data);
    }

    #[test]
    fn integer_flow_shifts_with_border_clamp() {
        // src row: [10, 20, 30, 40]; flow dx = +1 pulls from the right.
        let src =
            TensorData::from_vec(Shape::new(1, 1, 1, 4), vec![10.0f64, 20.0, 30.0, 40.0]).unwrap();
        let mut flow = TensorData::zeros(Shape::new(1, 2, 1, 4));
        for x in 0..4 {
            *flow.at_mut(0, 0, 0, x) = 1.0;
        }
        let out = warp_forward(&src, &flow).unwrap();
        assert_eq!(out.data, vec![20.0, 30.0, 40.0, 40.0]);
    }

    #[test]
    fn half_pixel_flow_averages_neighbors() {
        let src =
            TensorData::from_vec(Shape::new(1, 1, 1, 3), vec![0.0f64, 1.0, 3.0]).unwrap();
        let mut flow = TensorData::zeros(Shape::new(1, 2, 1, 3));
        *flow.at_mut(0, 0, 0, 0) = 0.5;
        *flow.at_mut(0, 0, 0, 1) = 0.5;
        let out = warp_forward(&src, &flow).unwrap();
        assert!((out.data[0] - 0.5).abs() < 1e-12);
        assert!((out.data[1] - 2.0).abs() < 1e-12);
        assert_eq!(out.data[2], 3.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s = Shape::new(1, 2, 5, 5);
        let src = random_tensor(&mut rng, s, -1.0, 1.0);
        // Keep samples strictly interior so the clamp never saturates and FD
        // stays smooth.
        let flow = random_tensor(&mut rng, Shape::new(1, 2, 5, 5), -0.9, 0.9);
        let r = random_tensor(&mut rng, s, -1.0, 1.0);
        let loss = |src: &TensorData<f64>, flow: &TensorData<f64>| -> f64 {
            let y = warp_forward(src, flow).unwrap();
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let grads = warp_backward(&src, &flow, &r).unwrap();
        let eps = 1e-6;
        for i in 0..src.shape.numel() {
            let mut p = src.clone();
            p.data[i] += eps;
            let mut m = src.clone();
            m.data[i] -= eps;
            let fd = (loss(&p, &flow) - loss(&m, &flow)) / (2.0 * eps);
            assert!(
                (fd - grads.dsrc.data[i]).abs() < 1e-6,
                "dsrc[{i}]: fd {fd} vs {}",
                grads.dsrc.data[i]
            );
        }
        for i in 0..flow.shape.numel() {
            // Skip entries whose perturbed sample would cross an integer grid
            // line (bilinear kinks there).
            let n = 0;
            let rest = i % (2 * 25);
            let ch = rest / 25;
            let y = (rest % 25) / 5;
            let x = rest % 5;
            let pos = if ch == 0 {
                x as f64 + flow.at(n, 0, y, x)
            } else {
                y as f64 + flow.at(n, 1, y, x)
            };
            if (pos - pos.floor()).abs() < 1e-4 || (pos - pos.floor()).abs() > 1.0 - 1e-4 {
                continue;
            }
            let mut p = flow.clone();
            p.data[i] += eps;
            let mut m = flow.clone();
            m.data[i] -= eps;
            let fd = (loss(&src, &p) - loss(&src, &m)) / (2.0 * eps);
            assert!(
                (fd - grads.dflow.data[i]).abs() < 1e-5,
                "dflow[{i}]: fd {fd} vs {}",
                grads.dflow.data[i]
            );
        }
    }

    #[test]
    fn saturated_flow_has_zero_flow_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Shape::new(1, 1, 3, 3);
        let src = random_tensor(&mut rng, s, -1.0, 1.0);
        let mut flow = TensorData::zeros(Shape::new(1, 2, 3, 3));
        for i in 0..flow.data.len() {
            flow.data[i] = 100.0; // everything clamps to the bottom-right corner
        }
        let dy = TensorData::full(s, 1.0);
        let grads = warp_backward(&src, &flow, &dy).unwrap();
        assert!(grads.dflow.data.iter().all(|v| *v == 0.0));
        // All mass lands on the corner pixel.
        assert_eq!(grads.dsrc.at(0, 0, 2, 2), 9.0);
    }
}

//! Classical coarse-to-fine optical flow by block matching, plus endpoint
//! error and forward-backward occlusion utilities.
//!
//! The estimator is deliberately simple: grayscale 8×8 blocks matched with a
//! ±4 px integer search per pyramid level, a parabolic subpixel fit at the
//! finest level, and one 3×3 diffusion pass per level. It is deterministic
//! (ties broken by displacement magnitude, then lexicographically) and
//! accurate to well under half a pixel on translational scenes, which is the
//! regime the restoration pipeline needs it for.

use crate::error::PipelineError;
use crate::tensor::upsample::bilinear_up2_forward;
use crate::tensor::{Shape, TensorData};

const BLOCK: usize = 8;
const SEARCH: i64 = 4;

/// ITU-R 601 luma from an RGB frame; single-channel input passes through.
pub fn luma_601(frame: &TensorData<f32>) -> TensorData<f32> {
    let sh = frame.shape;
    assert_eq!(sh.n, 1, "luma expects a single image");
    match sh.c {
        1 => frame.clone(),
        3 => {
            let mut out = TensorData::zeros(Shape::new(1, 1, sh.h, sh.w));
            for y in 0..sh.h {
                for x in 0..sh.w {
                    out.data[y * sh.w + x] = 0.299 * frame.at(0, 0, y, x)
                        + 0.587 * frame.at(0, 1, y, x)
                        + 0.114 * frame.at(0, 2, y, x);
                }
            }
            out
        }
        c => panic!("luma expects 1 or 3 channels, got {c}"),
    }
}

/// 2×2 mean-pool downsample (floor dimensions).
fn downsample2(g: &TensorData<f32>) -> TensorData<f32> {
    let (h, w) = (g.shape.h, g.shape.w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = TensorData::zeros(Shape::new(1, 1, oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let s = g.at(0, 0, 2 * y, 2 * x)
                + g.at(0, 0, 2 * y, 2 * x + 1)
                + g.at(0, 0, 2 * y + 1, 2 * x)
                + g.at(0, 0, 2 * y + 1, 2 * x + 1);
            out.data[y * ow + x] = s * 0.25;
        }
    }
    out
}

/// Grow a flow field by at most one replicated row/column to hit (h, w).
/// Needed when an odd-sized level halves to floor(dim/2) and the ×2
/// upsample comes back one short.
fn fit_to(flow: &TensorData<f32>, h: usize, w: usize) -> TensorData<f32> {
    let sh = flow.shape;
    debug_assert!(h - sh.h <= 1 && w - sh.w <= 1, "fit_to only repairs off-by-one sizes");
    if sh.h == h && sh.w == w {
        return flow.clone();
    }
    let mut out = TensorData::zeros(Shape::new(1, sh.c, h, w));
    for c in 0..sh.c {
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(0, c, y, x) = flow.at(0, c, y.min(sh.h - 1), x.min(sh.w - 1));
            }
        }
    }
    out
}

/// Mean absolute difference between block (x0,y0)..(x0+bw,y0+bh) of `a` and
/// the same block displaced by (dx,dy) in `b`, normalized over the pixels
/// that land in-bounds. `None` when fewer than a quarter of the block does.
fn block_cost(
    a: &TensorData<f32>,
    b: &TensorData<f32>,
    x0: usize,
    y0: usize,
    bw: usize,
    bh: usize,
    dx: i64,
    dy: i64,
) -> Option<f64> {
    let (h, w) = (a.shape.h as i64, a.shape.w as i64);
    let mut sum = 0.0f64;
    let mut valid = 0usize;
    for yy in 0..bh {
        let sy = y0 as i64 + yy as i64 + dy;
        if sy < 0 || sy >= h {
            continue;
        }
        for xx in 0..bw {
            let sx = x0 as i64 + xx as i64 + dx;
            if sx < 0 || sx >= w {
                continue;
            }
            let va = a.at(0, 0, y0 + yy, x0 + xx);
            let vb = b.at(0, 0, sy as usize, sx as usize);
            sum += (va - vb).abs() as f64;
            valid += 1;
        }
    }
    if valid * 4 < bw * bh {
        None
    } else {
        Some(sum / valid as f64)
    }
}

/// Parabolic 1D subpixel offset from costs at -1/0/+1. Zero when the
/// vertex is not a minimum between the samples, and zero for a perfect
/// integer match: a SAD of exactly 0 cannot be improved, and fitting a
/// parabola through it would drift toward whichever neighbor is cheaper.
fn parabolic_offset(c_m: Option<f64>, c_0: f64, c_p: Option<f64>) -> f64 {
    if c_0 == 0.0 {
        return 0.0;
    }
    let (c_m, c_p) = match (c_m, c_p) {
        (Some(m), Some(p)) => (m, p),
        _ => return 0.0,
    };
    let denom = c_m - 2.0 * c_0 + c_p;
    if denom <= 1e-12 || c_0 > c_m || c_0 > c_p {
        return 0.0;
    }
    (0.5 * (c_m - c_p) / denom).clamp(-0.5, 0.5)
}

/// One pyramid level: per-block integer search around the initial flow,
/// optional subpixel refinement, then densification to a per-pixel field.
fn match_level(
    ga: &TensorData<f32>,
    gb: &TensorData<f32>,
    init: &TensorData<f32>,
    subpixel: bool,
) -> TensorData<f32> {
    let (h, w) = (ga.shape.h, ga.shape.w);
    let nbx = w.div_ceil(BLOCK);
    let nby = h.div_ceil(BLOCK);
    let mut bdx = vec![0.0f64; nbx * nby];
    let mut bdy = vec![0.0f64; nbx * nby];
    for by in 0..nby {
        let y0 = (by * BLOCK).min(h - BLOCK);
        for bx in 0..nbx {
            let x0 = (bx * BLOCK).min(w - BLOCK);
            let cx = x0 + BLOCK / 2;
            let cy = y0 + BLOCK / 2;
            let d0x = init.at(0, 0, cy, cx).round() as i64;
            let d0y = init.at(0, 1, cy, cx).round() as i64;
            // (cost, |d|^2, dx, dy) lexicographic minimum over the window.
            let mut best: Option<(f64, i64, i64, i64)> = None;
            for dy in (d0y - SEARCH)..=(d0y + SEARCH) {
                for dx in (d0x - SEARCH)..=(d0x + SEARCH) {
                    let Some(cost) = block_cost(ga, gb, x0, y0, BLOCK, BLOCK, dx, dy) else {
                        continue;
                    };
                    let key = (cost, dx * dx + dy * dy, dx, dy);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
            let (mut fx, mut fy) = match best {
                Some((_, _, dx, dy)) => (dx as f64, dy as f64),
                // Block never overlapped the other frame; keep the prior.
                None => (d0x as f64, d0y as f64),
            };
            if subpixel {
                if let Some((c0, _, dx, dy)) = best {
                    fx += parabolic_offset(
                        block_cost(ga, gb, x0, y0, BLOCK, BLOCK, dx - 1, dy),
                        c0,
                        block_cost(ga, gb, x0, y0, BLOCK, BLOCK, dx + 1, dy),
                    );
                    fy += parabolic_offset(
                        block_cost(ga, gb, x0, y0, BLOCK, BLOCK, dx, dy - 1),
                        c0,
                        block_cost(ga, gb, x0, y0, BLOCK, BLOCK, dx, dy + 1),
                    );
                }
            }
            bdx[by * nbx + bx] = fx;
            bdy[by * nbx + bx] = fy;
        }
    }
    let mut out = TensorData::zeros(Shape::new(1, 2, h, w));
    for y in 0..h {
        let by = (y / BLOCK).min(nby - 1);
        for x in 0..w {
            let bx = (x / BLOCK).min(nbx - 1);
            *out.at_mut(0, 0, y, x) = bdx[by * nbx + bx] as f32;
            *out.at_mut(0, 1, y, x) = bdy[by * nbx + bx] as f32;
        }
    }
    out
}

/// One 3×3 box-diffusion pass per channel with clamped borders.
fn box_smooth3(flow: &TensorData<f32>) -> TensorData<f32> {
    let sh = flow.shape;
    let mut out = TensorData::zeros(sh);
    for c in 0..sh.c {
        for y in 0..sh.h {
            for x in 0..sh.w {
                let mut s = 0.0f32;
                for oy in -1i64..=1 {
                    for ox in -1i64..=1 {
                        let yy = (y as i64 + oy).clamp(0, sh.h as i64 - 1) as usize;
                        let xx = (x as i64 + ox).clamp(0, sh.w as i64 - 1) as usize;
                        s += flow.at(0, c, yy, xx);
                    }
                }
                *out.at_mut(0, c, y, x) = s / 9.0;
            }
        }
    }
    out
}

/// Estimate the flow carrying pixels of `a` onto `b`: backward-warping `b`
/// by the result reconstructs `a`. `levels` pyramid levels are used (each
/// halves the resolution); levels that would shrink below one block are
/// dropped automatically.
pub fn estimate_flow(
    a: &TensorData<f32>,
    b: &TensorData<f32>,
    levels: usize,
) -> Result<TensorData<f32>, PipelineError> {
    if a.shape != b.shape {
        return Err(PipelineError::Invalid(format!(
            "flow inputs differ in shape: {} vs {}",
            a.shape, b.shape
        )));
    }
    if levels == 0 {
        return Err(PipelineError::Invalid("flow needs at least one pyramid level".into()));
    }
    let (h, w) = (a.shape.h, a.shape.w);
    if h < BLOCK || w < BLOCK {
        return Err(PipelineError::Invalid(format!(
            "image {h}x{w} is smaller than one {BLOCK}x{BLOCK} matching block"
        )));
    }
    let mut pyr_a = vec![luma_601(a)];
    let mut pyr_b = vec![luma_601(b)];
    while pyr_a.len() < levels {
        let next = downsample2(pyr_a.last().unwrap());
        if next.shape.h < BLOCK || next.shape.w < BLOCK {
            break;
        }
        pyr_b.push(downsample2(pyr_b.last().unwrap()));
        pyr_a.push(next);
    }

    let coarsest = pyr_a.len() - 1;
    let mut flow = TensorData::zeros(Shape::new(1, 2, pyr_a[coarsest].shape.h, pyr_a[coarsest].shape.w));
    for l in (0..=coarsest).rev() {
        if l != coarsest {
            let mut up = bilinear_up2_forward(&flow);
            for v in up.data.iter_mut() {
                *v *= 2.0;
            }
            flow = fit_to(&up, pyr_a[l].shape.h, pyr_a[l].shape.w);
        }
        flow = match_level(&pyr_a[l], &pyr_b[l], &flow, l == 0);
        flow = box_smooth3(&flow);
    }
    Ok(flow)
}

/// Mean endpoint error between two flow fields, optionally restricted to
/// the pixels where `region` > 0.5.
pub fn epe(
    f: &TensorData<f32>,
    gt: &TensorData<f32>,
    region: Option<&TensorData<f32>>,
) -> Result<f64, PipelineError> {
    if f.shape != gt.shape || f.shape.c != 2 {
        return Err(PipelineError::Invalid(format!(
            "endpoint error needs two matching 2-channel fields, got {} vs {}",
            f.shape, gt.shape
        )));
    }
    if let Some(m) = region {
        if m.shape.h != f.shape.h || m.shape.w != f.shape.w {
            return Err(PipelineError::Invalid(format!(
                "region {} does not match flow {}",
                m.shape, f.shape
            )));
        }
    }
    let (h, w) = (f.shape.h, f.shape.w);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = region {
                if m.at(0, 0, y, x) <= 0.5 {
                    continue;
                }
            }
            let ex = (f.at(0, 0, y, x) - gt.at(0, 0, y, x)) as f64;
            let ey = (f.at(0, 1, y, x) - gt.at(0, 1, y, x)) as f64;
            sum += (ex * ex + ey * ey).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(PipelineError::Invalid("endpoint-error region is empty".into()));
    }
    Ok(sum / count as f64)
}

/// Forward-backward occlusion check. A pixel is occluded when its forward
/// target leaves the frame, or when the backward flow sampled at the target
/// fails to cancel the forward flow within `tol` pixels.
pub fn occlusion_mask(
    fwd: &TensorData<f32>,
    bwd: &TensorData<f32>,
    tol: f32,
) -> Result<TensorData<f32>, PipelineError> {
    if fwd.shape != bwd.shape || fwd.shape.c != 2 {
        return Err(PipelineError::Invalid(format!(
            "occlusion check needs two matching 2-channel fields, got {} vs {}",
            fwd.shape, bwd.shape
        )));
    }
    if !(tol > 0.0) {
        return Err(PipelineError::Invalid(format!("occlusion tolerance must be positive, got {tol}")));
    }
    let (h, w) = (fwd.shape.h, fwd.shape.w);
    let mut out = TensorData::zeros(Shape::new(1, 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let fx = fwd.at(0, 0, y, x);
            let fy = fwd.at(0, 1, y, x);
            let tx = x as f32 + fx;
            let ty = y as f32 + fy;
            let occluded = if tx < 0.0 || ty < 0.0 || tx > (w - 1) as f32 || ty > (h - 1) as f32 {
                true
            } else {
                let x0 = (tx.floor() as usize).min(w - 1);
                let y0 = (ty.floor() as usize).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let wx = tx - x0 as f32;
                let wy = ty - y0 as f32;
                let mut res = [0.0f32; 2];
                for (c, r) in res.iter_mut().enumerate() {
                    let v00 = bwd.at(0, c, y0, x0);
                    let v01 = bwd.at(0, c, y0, x1);
                    let v10 = bwd.at(0, c, y1, x0);
                    let v11 = bwd.at(0, c, y1, x1);
                    let top = v00 + wx * (v01 - v00);
                    let bot = v10 + wx * (v11 - v10);
                    *r = top + wy * (bot - top);
                }
                let rx = fx + res[0];
                let ry = fy + res[1];
                rx * rx + ry * ry > tol * tol
            };
            *out.at_mut(0, 0, y, x) = if occluded { 1.0 } else { 0.0 };
        }
    }
    Ok(out)
}

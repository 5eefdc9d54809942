//! Lens contaminants: blurred blob alphas and the three-shader compositing
//! model (attenuation, refraction-by-gradient, additive scatter).

use crate::tensor::warp::warp_forward;
use crate::tensor::{Shape, TensorData};
use serde::{Deserialize, Serialize};

/// One contaminant blob: a deformed disc (radial cosine series) rasterized
/// per frame at its drifted position, then defocus-blurred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    /// Center at frame 0, pixels.
    pub center: (f64, f64),
    /// Base radius, pixels.
    pub radius: f64,
    /// Radial harmonics (amplitude_j, phase_j) for j = 1..; the boundary is
    /// rho(theta) = radius * (1 + sum_j amp_j * cos(j*theta + phase_j)).
    pub harmonics: Vec<(f64, f64)>,
    /// Defocus blur sigma, pixels.
    pub sigma_b: f64,
    /// Attenuation strength a in [0,1] (transparent shader).
    pub attenuation: f64,
    /// Scatter radiance e in [0, 0.6] (emission shader).
    pub scatter: f64,
    /// Refraction displacement amplitude d in [0, 2] px (glass shader).
    pub refraction: f64,
    /// Per-frame drift velocity, pixels; small versus background motion.
    pub drift: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminantSpec {
    pub blobs: Vec<BlobSpec>,
}

/// Binary inside-test of the deformed disc at frame `t`, then Gaussian blur.
pub fn rasterize_alpha(blob: &BlobSpec, w: usize, h: usize, t: usize) -> TensorData<f32> {
    let cx = blob.center.0 + t as f64 * blob.drift.0;
    let cy = blob.center.1 + t as f64 * blob.drift.1;
    let mut hard = TensorData::zeros(Shape::new(1, 1, h, w));
    // Boundary never exceeds radius * (1 + sum |amp|); skip pixels beyond it.
    let amp_sum: f64 = blob.harmonics.iter().map(|(a, _)| a.abs()).sum();
    let rmax = blob.radius * (1.0 + amp_sum);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist > rmax {
                continue;
            }
            let theta = dy.atan2(dx);
            let mut rho = blob.radius;
            for (j, (a, p)) in blob.harmonics.iter().enumerate() {
                rho += blob.radius * a * ((j as f64 + 1.0) * theta + p).cos();
            }
            if dist <= rho {
                *hard.at_mut(0, 0, y, x) = 1.0;
            }
        }
    }
    gaussian_blur(&hard, blob.sigma_b)
}

/// Separable Gaussian blur with border clamp; kernel truncated at 3 sigma so
/// the support (and thus "alpha > 0") stays local.
pub fn gaussian_blur(map: &TensorData<f32>, sigma: f64) -> TensorData<f32> {
    if sigma <= 0.0 {
        return map.clone();
    }
    let s = map.shape;
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f64;
    for i in -radius..=radius {
        let v = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = TensorData::zeros(s);
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                let mut acc = 0.0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = clampi(x as isize + ki as isize - radius, s.w);
                    acc += kv * map.at(0, c, y, sx) as f64;
                }
                *tmp.at_mut(0, c, y, x) = acc as f32;
            }
        }
    }
    let mut out = TensorData::zeros(s);
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                let mut acc = 0.0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = clampi(y as isize + ki as isize - radius, s.h);
                    acc += kv * tmp.at(0, c, sy, x) as f64;
                }
                *out.at_mut(0, c, y, x) = acc as f32;
            }
        }
    }
    out
}

/// Central-difference gradient of a single-channel map, as a `[1,2,h,w]`
/// displacement-style field (one-sided at borders).
pub fn alpha_gradient(alpha: &TensorData<f32>) -> TensorData<f32> {
    let s = alpha.shape;
    let mut g = TensorData::zeros(Shape::new(1, 2, s.h, s.w));
    for y in 0..s.h {
        for x in 0..s.w {
            let xm = alpha.at(0, 0, y, x.saturating_sub(1));
            let xp = alpha.at(0, 0, y, (x + 1).min(s.w - 1));
            let denom_x = ((x + 1).min(s.w - 1) - x.saturating_sub(1)) as f32;
            *g.at_mut(0, 0, y, x) = if denom_x > 0.0 { (xp - xm) / denom_x } else { 0.0 };
            let ym = alpha.at(0, 0, y.saturating_sub(1), x);
            let yp = alpha.at(0, 0, (y + 1).min(s.h - 1), x);
            let denom_y = ((y + 1).min(s.h - 1) - y.saturating_sub(1)) as f32;
            *g.at_mut(0, 1, y, x) = if denom_y > 0.0 { (yp - ym) / denom_y } else { 0.0 };
        }
    }
    g
}

/// Image formation for one contaminant layer:
/// `I(p) = clamp((1 - a*alpha(p)) * C(p + d*grad_alpha(p)) + e*alpha(p), 0, 1)`.
pub fn composite_single(
    clean: &TensorData<f32>,
    alpha: &TensorData<f32>,
    attenuation: f64,
    scatter: f64,
    refraction: f64,
) -> TensorData<f32> {
    let s = clean.shape;
    assert_eq!(
        (alpha.shape.h, alpha.shape.w, alpha.shape.c),
        (s.h, s.w, 1),
        "alpha must be a [1,1,h,w] map matching the frame"
    );
    let refracted = if refraction != 0.0 {
        let mut flow = alpha_gradient(alpha);
        for v in &mut flow.data {
            *v *= refraction as f32;
        }
        warp_forward(clean, &flow).expect("shapes verified above")
    } else {
        clean.clone()
    };
    let mut out = TensorData::zeros(s);
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                let al = alpha.at(0, 0, y, x) as f64;
                let v = (1.0 - attenuation * al) * refracted.at(0, c, y, x) as f64 + scatter * al;
                *out.at_mut(0, c, y, x) = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Union of per-blob alphas: `1 - prod(1 - alpha_i)`.
pub fn alpha_union(alphas: &[TensorData<f32>]) -> TensorData<f32> {
    assert!(!alphas.is_empty());
    let mut total = TensorData::full(alphas[0].shape, 1.0f32);
    for a in alphas {
        for (t, v) in total.data.iter_mut().zip(&a.data) {
            *t *= 1.0 - *v;
        }
    }
    for t in &mut total.data {
        *t = 1.0 - *t;
    }
    total
}

/// Binary ground-truth attention: `alpha > tau`.
pub fn derive_gt_attention(alpha: &TensorData<f32>, tau: f32) -> TensorData<f32> {
    let mut mask = TensorData::zeros(alpha.shape);
    for (m, a) in mask.data.iter_mut().zip(&alpha.data) {
        *m = if *a > tau { 1.0 } else { 0.0 };
    }
    mask
}

/// Apply every blob of `spec` to the clean frame `t`, returning the
/// contaminated frame and the union alpha.
pub fn apply_contaminants(
    clean: &TensorData<f32>,
    spec: &ContaminantSpec,
    t: usize,
) -> (TensorData<f32>, TensorData<f32>) {
    let s = clean.shape;
    let mut image = clean.clone();
    let mut alphas = Vec::with_capacity(spec.blobs.len());
    for blob in &spec.blobs {
        let alpha = rasterize_alpha(blob, s.w, s.h, t);
        image = composite_single(&image, &alpha, blob.attenuation, blob.scatter, blob.refraction);
        alphas.push(alpha);
    }
    let union = if alphas.is_empty() {
        TensorData::zeros(Shape::new(1, 1, s.h, s.w))
    } else {
        alpha_union(&alphas)
    };
    (image, union)
}

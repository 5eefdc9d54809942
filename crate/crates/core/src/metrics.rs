//! Evaluation metrics: PSNR, SSIM over a uniform window, warping error over
//! a sequence with occlusion exclusion, plus the report structures the
//! evaluator serializes to JSON and CSV.

use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::flow::{estimate_flow, luma_601, occlusion_mask};
use crate::tensor::warp::warp_forward;
use crate::tensor::TensorData;

/// PSNR values are capped here so identical frames report a finite number.
pub const PSNR_CAP_DB: f64 = 99.0;

/// SSIM sliding-window side length.
pub const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Forward-backward tolerance (pixels) for the occlusion check inside the
/// warping-error metric.
pub const OCCLUSION_TOL: f32 = 1.0;

/// Peak signal-to-noise ratio in dB between two same-shaped frames with
/// values in [0, 1]: −10·log10(MSE) over every element, capped at 99 dB.
pub fn psnr(x: &TensorData<f32>, y: &TensorData<f32>) -> Result<f64, PipelineError> {
    if x.shape != y.shape {
        return Err(PipelineError::Invalid(format!(
            "psnr needs matching shapes, got {} vs {}",
            x.shape, y.shape
        )));
    }
    let mut sum = 0.0f64;
    for (a, b) in x.data.iter().zip(y.data.iter()) {
        let d = (a - b) as f64;
        sum += d * d;
    }
    let mse = sum / x.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Structural similarity between two frames: ITU-R 601 luma first, then the
/// standard SSIM formula averaged over every 8×8 uniform window position
/// (K1 = 0.01, K2 = 0.03, dynamic range 1). Frames smaller than the window
/// are rejected.
pub fn ssim(x: &TensorData<f32>, y: &TensorData<f32>) -> Result<f64, PipelineError> {
    if x.shape != y.shape {
        return Err(PipelineError::Invalid(format!(
            "ssim needs matching shapes, got {} vs {}",
            x.shape, y.shape
        )));
    }
    let (h, w) = (x.shape.h, x.shape.w);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(PipelineError::Invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let lx = luma_601(x);
    let ly = luma_601(y);

    // Prefix sums over luma, squares, and the cross product let each window
    // be reduced in O(1).
    let sx = prefix_sums(&lx, &lx);
    let sy = prefix_sums(&ly, &ly);
    let sxy = prefix_sums(&lx, &ly);
    let px = prefix_plain(&lx);
    let py = prefix_plain(&ly);

    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let mx = window_sum(&px, w, y0, x0) / n;
            let my = window_sum(&py, w, y0, x0) / n;
            let vx = window_sum(&sx, w, y0, x0) / n - mx * mx;
            let vy = window_sum(&sy, w, y0, x0) / n - my * my;
            let cov = window_sum(&sxy, w, y0, x0) / n - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

fn prefix_plain(img: &TensorData<f32>) -> Vec<f64> {
    prefix_with(img, |v, _| v)
}

fn prefix_sums(a: &TensorData<f32>, b: &TensorData<f32>) -> Vec<f64> {
    let bd: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    prefix_with(a, |v, i| v * bd[i])
}

fn prefix_with(img: &TensorData<f32>, f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
    let (h, w) = (img.shape.h, img.shape.w);
    let mut p = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            p[(y + 1) * (w + 1) + (x + 1)] = f(img.data[i] as f64, i)
                + p[y * (w + 1) + (x + 1)]
                + p[(y + 1) * (w + 1) + x]
                - p[y * (w + 1) + x];
        }
    }
    p
}

fn window_sum(p: &[f64], w: usize, y0: usize, x0: usize) -> f64 {
    let (y1, x1) = (y0 + SSIM_WINDOW, x0 + SSIM_WINDOW);
    p[y1 * (w + 1) + x1] - p[y0 * (w + 1) + x1] - p[y1 * (w + 1) + x0] + p[y0 * (w + 1) + x0]
}

/// Mean absolute residual between `cur` and the warped `prev`, over pixels
/// where `occluded` (1 = exclude) is clear. `None` when nothing is
/// measurable.
fn pair_residual(
    cur: &TensorData<f32>,
    prev: &TensorData<f32>,
    flow: &TensorData<f32>,
    occluded: Option<&TensorData<f32>>,
) -> Result<Option<f64>, PipelineError> {
    let warped = warp_forward(prev, flow).map_err(PipelineError::Tensor)?;
    let (c, h, w) = (cur.shape.c, cur.shape.h, cur.shape.w);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = occluded {
                if m.at(0, 0, y, x) > 0.5 {
                    continue;
                }
            }
            for ch in 0..c {
                sum += (cur.at(0, ch, y, x) - warped.at(0, ch, y, x)).abs() as f64;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { None } else { Some(sum / count as f64) })
}

/// Warping error of a sequence: for each consecutive pair the earlier frame
/// is warped onto the later one by flow estimated *on the sequence itself*,
/// occluded pixels (forward-backward check) are excluded, and the mean
/// absolute residual is averaged over pairs. Pairs with no measurable
/// pixels are skipped with a warning; erroring only if none remain.
pub fn warp_error(frames: &[TensorData<f32>], flow_levels: usize) -> Result<f64, PipelineError> {
    if frames.len() < 2 {
        return Err(PipelineError::Invalid(format!(
            "warping error needs at least two frames, got {}",
            frames.len()
        )));
    }
    let mut pairs = Vec::new();
    for t in 1..frames.len() {
        if frames[t].shape != frames[0].shape {
            return Err(PipelineError::Invalid("warp-error frames must share a shape".into()));
        }
        let fwd = estimate_flow(&frames[t], &frames[t - 1], flow_levels)?;
        let bwd = estimate_flow(&frames[t - 1], &frames[t], flow_levels)?;
        let occ = occlusion_mask(&fwd, &bwd, OCCLUSION_TOL)?;
        match pair_residual(&frames[t], &frames[t - 1], &fwd, Some(&occ))? {
            Some(r) => pairs.push(r),
            None => log::warn!("warp-error pair {}->{} fully occluded; skipped", t - 1, t),
        }
    }
    if pairs.is_empty() {
        return Err(PipelineError::Invalid("every warp-error pair was fully occluded".into()));
    }
    Ok(pairs.iter().sum::<f64>() / pairs.len() as f64)
}

/// Warping error against externally supplied flows (ground truth on
/// synthetic clips): `flows[t-1]` must be registered with frame `t`,
/// sampling frame `t-1`. Optional per-pair occlusion masks (1 = exclude).
pub fn warp_error_with_flows(
    frames: &[TensorData<f32>],
    flows: &[TensorData<f32>],
    occlusions: Option<&[TensorData<f32>]>,
) -> Result<f64, PipelineError> {
    if frames.len() < 2 || flows.len() + 1 != frames.len() {
        return Err(PipelineError::Invalid(format!(
            "warping error needs n frames and n-1 flows, got {} and {}",
            frames.len(),
            flows.len()
        )));
    }
    if let Some(occ) = occlusions {
        if occ.len() != flows.len() {
            return Err(PipelineError::Invalid("one occlusion mask per flow required".into()));
        }
    }
    let mut pairs = Vec::new();
    for t in 1..frames.len() {
        let occ = occlusions.map(|o| &o[t - 1]);
        match pair_residual(&frames[t], &frames[t - 1], &flows[t - 1], occ)? {
            Some(r) => pairs.push(r),
            None => log::warn!("warp-error pair {}->{} fully occluded; skipped", t - 1, t),
        }
    }
    if pairs.is_empty() {
        return Err(PipelineError::Invalid("every warp-error pair was fully occluded".into()));
    }
    Ok(pairs.iter().sum::<f64>() / pairs.len() as f64)
}

/// Quality numbers for one frame of one clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Mean and population standard deviation of a metric across frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Aggregate {
        if values.is_empty() {
            return Aggregate { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        Aggregate { mean, std: var.sqrt() }
    }
}

/// Everything measured on one clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub per_frame: Vec<FrameMetrics>,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    /// Warping error of the restored sequence, when computed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warp_error: Option<f64>,
    /// Mean endpoint error of completed flows against ground truth, when
    /// ground-truth flow exists.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epe: Option<f64>,
}

impl ClipMetrics {
    /// Score a restored clip against its clean counterpart frame by frame.
    pub fn score(
        clip_id: impl Into<String>,
        restored: &[TensorData<f32>],
        clean: &[TensorData<f32>],
    ) -> Result<ClipMetrics, PipelineError> {
        if restored.len() != clean.len() || restored.is_empty() {
            return Err(PipelineError::Invalid(format!(
                "scoring needs equal non-empty frame lists, got {} and {}",
                restored.len(),
                clean.len()
            )));
        }
        let mut per_frame = Vec::with_capacity(restored.len());
        for (i, (r, c)) in restored.iter().zip(clean.iter()).enumerate() {
            per_frame.push(FrameMetrics { frame: i, psnr_db: psnr(r, c)?, ssim: ssim(r, c)? });
        }
        let psnrs: Vec<f64> = per_frame.iter().map(|f| f.psnr_db).collect();
        let ssims: Vec<f64> = per_frame.iter().map(|f| f.ssim).collect();
        Ok(ClipMetrics {
            clip_id: clip_id.into(),
            per_frame,
            psnr: Aggregate::of(&psnrs),
            ssim: Aggregate::of(&ssims),
            warp_error: None,
            epe: None,
        })
    }
}

/// A full evaluation run: one entry per clip plus cross-clip aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clips: Vec<ClipMetrics>,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warp_error: Option<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epe: Option<Aggregate>,
}

impl MetricsReport {
    /// Aggregate per-clip results; clip-level means are averaged with equal
    /// clip weight regardless of length.
    pub fn from_clips(clips: Vec<ClipMetrics>) -> MetricsReport {
        let psnrs: Vec<f64> = clips.iter().map(|c| c.psnr.mean).collect();
        let ssims: Vec<f64> = clips.iter().map(|c| c.ssim.mean).collect();
        let warps: Vec<f64> = clips.iter().filter_map(|c| c.warp_error).collect();
        let epes: Vec<f64> = clips.iter().filter_map(|c| c.epe).collect();
        MetricsReport {
            psnr: Aggregate::of(&psnrs),
            ssim: Aggregate::of(&ssims),
            warp_error: if warps.is_empty() { None } else { Some(Aggregate::of(&warps)) },
            epe: if epes.is_empty() { None } else { Some(Aggregate::of(&epes)) },
            clips,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<MetricsReport, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Flat per-frame table with clip-level columns repeated on each row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,frame,psnr_db,ssim,clip_warp_error,clip_epe\n");
        for clip in &self.clips {
            for f in &clip.per_frame {
                let warp = clip.warp_error.map_or(String::new(), |v| format!("{v}"));
                let epe = clip.epe.map_or(String::new(), |v| format!("{v}"));
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    clip.clip_id, f.frame, f.psnr_db, f.ssim, warp, epe
                ));
            }
        }
        out
    }
}

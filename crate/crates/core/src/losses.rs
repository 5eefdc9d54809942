//! Training objectives: attention BCE, iteration-weighted fusion MSE,
//! multi-scale perceptual distance, temporal-consistency penalty, and the
//! weighted totals that combine them for each training stage.

use crate::error::TensorError;
use crate::nets::FeaturePyramid;
use crate::tensor::{ConvSpec, Scalar, Shape, Tape, TensorData, TensorId};

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the logs so a
/// saturated sigmoid cannot produce an infinite loss.
pub const BCE_EPS: f64 = 1e-6;

/// Geometric decay applied to earlier restoration iterations in
/// [`fusion_loss`]: the final iteration weighs 1, each step back ×0.8.
pub const FUSION_GAMMA: f64 = 0.8;

/// Bandwidth of the temporal-consistency discount: a clean-frame warp
/// residual of sqrt(mu) drops the per-pixel weight to 1/e.
pub const TEMPORAL_MU: f64 = 0.02;

/// Multiplier on the fusion term in both stage totals.
pub const FUSION_WEIGHT: f64 = 100.0;
/// Multiplier on the perceptual term in both stage totals.
pub const SPATIAL_WEIGHT: f64 = 10.0;
/// Multiplier on the temporal-consistency term in the sequence-stage total.
pub const TEMPORAL_WEIGHT: f64 = 10.0;

/// Binary cross-entropy between a soft prediction and its target, averaged
/// over every element. Gradients stop at the clamp boundaries, so saturated
/// predictions neither explode nor learn.
pub fn bce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: TensorId,
    target: TensorId,
) -> Result<TensorId, TensorError> {
    let p = tape.clamp(pred, BCE_EPS, 1.0 - BCE_EPS);
    let log_p = tape.ln(p)?;
    let q = tape.one_minus(p);
    let log_q = tape.ln(q)?;
    let not_target = tape.one_minus(target);
    let hit = tape.mul(target, log_p)?;
    let miss = tape.mul(not_target, log_q)?;
    let sum = tape.add(hit, miss)?;
    let mean = tape.mean_all(sum);
    Ok(tape.scale(mean, -1.0))
}

/// Mean squared error over all elements of two same-shaped tensors.
pub fn mse_loss<T: Scalar>(
    tape: &mut Tape<T>,
    a: TensorId,
    b: TensorId,
) -> Result<TensorId, TensorError> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Iteration-weighted restoration loss: each intermediate blend `T_i` is
/// compared to the clean frame by MSE, with the last iteration weighted 1
/// and each earlier one discounted by another factor of `gamma`, then
/// averaged over the iteration count.
pub fn fusion_loss<T: Scalar>(
    tape: &mut Tape<T>,
    blends: &[TensorId],
    clean: TensorId,
    gamma: f64,
) -> Result<TensorId, TensorError> {
    if blends.is_empty() {
        return Err(TensorError::Invalid("fusion_loss needs at least one blend".into()));
    }
    if gamma <= 0.0 {
        return Err(TensorError::Invalid(format!("fusion gamma must be positive, got {gamma}")));
    }
    let n = blends.len();
    let mut total: Option<TensorId> = None;
    for (i, &blend) in blends.iter().enumerate() {
        let mse = mse_loss(tape, blend, clean)?;
        let term = tape.scale(mse, gamma.powi((n - 1 - i) as i32));
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), 1.0 / n as f64))
}

/// Multi-scale perceptual distance: every restored frame is compared to the
/// clean frame in the frozen pyramid's feature spaces, MSE per level,
/// averaged over frames and levels.
pub fn pyramid_perceptual_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pyramid: &FeaturePyramid<T>,
    restored: &[TensorId],
    clean: TensorId,
) -> Result<TensorId, TensorError> {
    if restored.is_empty() {
        return Err(TensorError::Invalid("perceptual loss needs at least one frame".into()));
    }
    let clean_feats = pyramid.features(tape, clean);
    let mut total: Option<TensorId> = None;
    for &frame in restored {
        let feats = pyramid.features(tape, frame);
        for (&f, &c) in feats.iter().zip(clean_feats.iter()) {
            let mse = mse_loss(tape, f, c)?;
            total = Some(match total {
                Some(t) => tape.add(t, mse)?,
                None => mse,
            });
        }
    }
    let norm = 1.0 / (restored.len() * clean_feats.len()) as f64;
    Ok(tape.scale(total.expect("non-empty"), norm))
}

/// Per-pixel channel sum via a ones-valued 1×1 convolution, used to reduce
/// residual norms to a single-channel map.
fn channel_sum<T: Scalar>(tape: &mut Tape<T>, x: TensorId) -> Result<TensorId, TensorError> {
    let c = tape.shape(x).c;
    let ones = tape.constant(TensorData::full(Shape::new(1, c, 1, 1), T::from_f64(1.0)));
    tape.conv2d(x, ones, None, ConvSpec::new(1, 0, 1))
}

/// Temporal-consistency penalty over a restored sequence. For each adjacent
/// pair, the previous output is warped forward and the per-pixel L1 residual
/// is discounted by `exp(-|clean residual|² / mu)`, so pixels the clean
/// sequence itself cannot align (disocclusions) stop contributing. The
/// discount is detached: it gates the penalty but is never itself a training
/// signal. `flows[t-1]` must be the field that warps frame `t-1` content
/// into frame `t` coordinates.
pub fn temporal_loss<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &[TensorId],
    cleans: &[TensorId],
    flows: &[TensorId],
    mu: f64,
) -> Result<TensorId, TensorError> {
    if outputs.len() < 2 {
        return Err(TensorError::Invalid(format!(
            "temporal loss needs at least two frames, got {}",
            outputs.len()
        )));
    }
    if cleans.len() != outputs.len() || flows.len() + 1 != outputs.len() {
        return Err(TensorError::Invalid(format!(
            "temporal loss length mismatch: {} outputs, {} cleans, {} flows",
            outputs.len(),
            cleans.len(),
            flows.len()
        )));
    }
    if mu <= 0.0 {
        return Err(TensorError::Invalid(format!("temporal mu must be positive, got {mu}")));
    }
    let mut total: Option<TensorId> = None;
    for t in 1..outputs.len() {
        let warped_clean = tape.warp(cleans[t - 1], flows[t - 1])?;
        let clean_diff = tape.sub(cleans[t], warped_clean)?;
        let clean_sq = tape.mul(clean_diff, clean_diff)?;
        let clean_err = channel_sum(tape, clean_sq)?;
        let scaled = tape.scale(clean_err, -1.0 / mu);
        let weight = tape.exp(scaled);
        let weight = tape.detach(weight);

        let warped_out = tape.warp(outputs[t - 1], flows[t - 1])?;
        let out_diff = tape.sub(outputs[t], warped_out)?;
        let residual = tape.abs(out_diff);
        let gated = tape.mul_channel_map(residual, weight)?;
        let term = tape.mean_all(gated);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(tape.scale(total.expect("len >= 2"), 1.0 / (outputs.len() - 1) as f64))
}

/// Single-frame training total: attention + flow + 100·fusion + 10·spatial.
pub fn stage1_total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    attention: TensorId,
    flow: TensorId,
    fusion: TensorId,
    spatial: TensorId,
    fusion_weight: f64,
    spatial_weight: f64,
) -> Result<TensorId, TensorError> {
    let fusion = tape.scale(fusion, fusion_weight);
    let spatial = tape.scale(spatial, spatial_weight);
    let a = tape.add(attention, flow)?;
    let b = tape.add(fusion, spatial)?;
    tape.add(a, b)
}

/// Sequence-refinement training total: flow + 100·fusion + 10·spatial +
/// 10·temporal. The attention term is absent because the detector is frozen
/// out of the second stage.
pub fn stage2_total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    flow: TensorId,
    fusion: TensorId,
    spatial: TensorId,
    temporal: TensorId,
    fusion_weight: f64,
    spatial_weight: f64,
    temporal_weight: f64,
) -> Result<TensorId, TensorError> {
    let fusion = tape.scale(fusion, fusion_weight);
    let spatial = tape.scale(spatial, spatial_weight);
    let temporal = tape.scale(temporal, temporal_weight);
    let a = tape.add(flow, fusion)?;
    let b = tape.add(spatial, temporal)?;
    tape.add(a, b)
}

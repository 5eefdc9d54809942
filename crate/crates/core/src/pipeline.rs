//! The two restoration passes: per-frame recurrent restoration against a
//! set of neighbor frames, and the sequential second pass that replays the
//! same machinery against the previous output to stabilize a whole clip.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::PipelineError;
use crate::flow::estimate_flow;
use crate::nets::{
    complete_flow, detect_attention, effective_map, temporal_blend, AttentionNet,
    FlowCompletionNet, Graph, RestorationNets,
};
use crate::tensor::{ParamStore, Scalar, Shape, TensorData, TensorId};

/// Trainable networks for the single-frame stage: contaminant detector,
/// flow completion, and the recurrent restorer. All parameters live in one
/// store so the optimizer and checkpoints see a flat named list.
pub struct Models<T: Scalar> {
    pub store: ParamStore<T>,
    pub detector: AttentionNet,
    pub completion: FlowCompletionNet,
    pub restoration: RestorationNets,
}

impl<T: Scalar> Models<T> {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let detector = AttentionNet::new(&mut store, &mut rng, "att");
        let completion = FlowCompletionNet::new(&mut store, &mut rng, "flow");
        let restoration = RestorationNets::new(&mut store, &mut rng, "rest");
        Models { store, detector, completion, restoration }
    }
}

/// Networks for the sequence-refinement stage: the same architecture minus
/// the detector, whose role is taken by an all-zero attention input.
pub struct SequenceModels<T: Scalar> {
    pub store: ParamStore<T>,
    pub completion: FlowCompletionNet,
    pub restoration: RestorationNets,
}

impl<T: Scalar> SequenceModels<T> {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let completion = FlowCompletionNet::new(&mut store, &mut rng, "flow");
        let restoration = RestorationNets::new(&mut store, &mut rng, "rest");
        SequenceModels { store, completion, restoration }
    }

    /// Start the refinement stage from trained single-frame weights: every
    /// parameter shared by name is copied over; the detector's parameters
    /// have no counterpart here and are dropped.
    pub fn from_stage_one(stage_one: &Models<T>) -> Result<Self, PipelineError> {
        let mut fresh = SequenceModels::new(0);
        for id in fresh.store.ids().collect::<Vec<_>>() {
            let name = fresh.store.name(id).to_string();
            let src = stage_one.store.find(&name).ok_or_else(|| {
                PipelineError::Invalid(format!("stage-one weights missing parameter `{name}`"))
            })?;
            let data = stage_one.store.value(src).data.clone();
            fresh.store.load_value(id, &data).map_err(PipelineError::Tensor)?;
        }
        Ok(fresh)
    }
}

/// Knobs for a restoration pass. The three `skip_`/`zero_` switches are
/// evaluation ablations; they change the forward computation, not just the
/// reporting.
#[derive(Debug, Clone, Default)]
pub struct RestoreOptions {
    /// Stop gradients at the completed flow before warping, so the blend
    /// and spatial losses cannot reach the completion net through the warp.
    /// Off by default: everything trains end-to-end.
    pub detach_completed_flow: bool,
    /// Replace both detector outputs with all-zero attention maps.
    pub zero_attention: bool,
    /// Warp with the raw estimated flow instead of the completed one.
    pub skip_completion: bool,
    /// Emit the blended frame directly, skipping spatial restoration.
    pub skip_spatial: bool,
}

/// Everything one single-frame restoration pass produced, one entry per
/// neighbor iteration. The graph ids stay valid as long as the tape they
/// were built on.
pub struct RestoreTrace {
    /// Detector output for the target frame, re-estimated per iteration.
    pub attention_target: Vec<TensorId>,
    /// Detector output for each neighbor.
    pub attention_ref: Vec<TensorId>,
    /// Estimated (degraded) flow fed to the completion net.
    pub degraded_flows: Vec<TensorId>,
    /// Completed flow actually used for warping.
    pub completed_flows: Vec<TensorId>,
    /// Blending masks M.
    pub masks: Vec<TensorId>,
    /// Running blends T after each iteration.
    pub blends: Vec<TensorId>,
    /// Spatially restored frames P after each iteration.
    pub restored: Vec<TensorId>,
    /// Final restored frame: the last entry of `restored`.
    pub output: TensorId,
    /// True when no neighbors were available and the output fell back to a
    /// bare spatial restoration of the target.
    pub used_fallback: bool,
}

/// Processing order for the neighbors of frame `target` in a clip of
/// `len` frames: alternating outward (t−1, t+1, t−2, t+2, …) up to
/// `radius` steps each way. Indices outside the clip are skipped, so
/// boundary frames simply get fewer iterations.
pub fn neighbor_order(target: usize, len: usize, radius: usize) -> Vec<usize> {
    let mut order = Vec::new();
    for d in 1..=radius {
        if target >= d {
            order.push(target - d);
        }
        let fwd = target + d;
        if fwd < len {
            order.push(fwd);
        }
    }
    order
}

/// A flow source that runs the classical block-matching estimator at
/// `levels` pyramid levels, converting through f32 where needed. The
/// returned field is registered with the first argument: backward-warping
/// the second argument by it reconstructs the first.
pub fn classical_flow<T: Scalar>(
    levels: usize,
) -> impl FnMut(&TensorData<T>, &TensorData<T>) -> Result<TensorData<T>, PipelineError> {
    move |a, b| {
        let fa = cast::<T, f32>(a);
        let fb = cast::<T, f32>(b);
        Ok(cast::<f32, T>(&estimate_flow(&fa, &fb, levels)?))
    }
}

fn cast<A: Scalar, B: Scalar>(x: &TensorData<A>) -> TensorData<B> {
    TensorData {
        shape: x.shape,
        data: x.data.iter().map(|v| B::from_f64(v.to_f64())).collect(),
    }
}

fn check_frame<T: Scalar>(g: &Graph<'_, T>, id: TensorId, what: &str) -> Result<Shape, PipelineError> {
    let s = g.tape.shape(id);
    if s.n != 1 || s.c != 3 {
        return Err(PipelineError::Invalid(format!("{what} must be a single RGB frame, got {s}")));
    }
    if s.h % 8 != 0 || s.w % 8 != 0 {
        return Err(PipelineError::Invalid(format!(
            "{what} dims must be divisible by 8, got {s}; pad first"
        )));
    }
    Ok(s)
}

/// Restore one frame against its neighbors. Per neighbor iteration: flows
/// are estimated in both directions, attention maps detected for both
/// frames (shared detector weights), the target-side flow completed and
/// used to warp the neighbor and its attention map, the usable-pixel map
/// formed, and the recurrent restorer advanced one step to produce a new
/// blend and restored frame. The blend chain starts at the target frame
/// itself. With no neighbors the restorer falls back to a bare spatial
/// restoration from a zero hidden state.
pub fn restore_frame<T, F>(
    models: &Models<T>,
    g: &mut Graph<'_, T>,
    target: TensorId,
    neighbors: &[TensorId],
    flow_between: &mut F,
    opts: &RestoreOptions,
) -> Result<RestoreTrace, PipelineError>
where
    T: Scalar,
    F: FnMut(&TensorData<T>, &TensorData<T>) -> Result<TensorData<T>, PipelineError>,
{
    let shape = check_frame(g, target, "target")?;
    for &n in neighbors {
        let s = check_frame(g, n, "neighbor")?;
        if s != shape {
            return Err(PipelineError::Invalid(format!(
                "neighbor resolution {s} differs from target {shape}"
            )));
        }
    }

    let mut trace = RestoreTrace {
        attention_target: Vec::new(),
        attention_ref: Vec::new(),
        degraded_flows: Vec::new(),
        completed_flows: Vec::new(),
        masks: Vec::new(),
        blends: Vec::new(),
        restored: Vec::new(),
        output: target,
        used_fallback: false,
    };

    let mut hidden = g.input(RestorationNets::zero_hidden(shape.h, shape.w));

    if neighbors.is_empty() {
        log::warn!("restoring a frame with no neighbors; spatial restoration only");
        let p = if opts.skip_spatial {
            target
        } else {
            models.restoration.spatial_restore(g, target, hidden)
        };
        trace.restored.push(p);
        trace.output = p;
        trace.used_fallback = true;
        return Ok(trace);
    }

    let target_data = g.tape.value(target).clone();
    let mut blend = target;
    for &nbr in neighbors {
        let nbr_data = g.tape.value(nbr).clone();
        let fwd = flow_between(&target_data, &nbr_data)?;
        let bwd = flow_between(&nbr_data, &target_data)?;
        let fwd = g.input(fwd);
        let bwd = g.input(bwd);

        let (att_t, att_k) = if opts.zero_attention {
            let z = g.input(TensorData::full(Shape::new(1, 1, shape.h, shape.w), T::ZERO));
            (z, z)
        } else {
            (
                detect_attention(&models.detector, g, target, fwd)?,
                detect_attention(&models.detector, g, nbr, bwd)?,
            )
        };
        let completed = if opts.skip_completion {
            fwd
        } else {
            complete_flow(&models.completion, g, fwd, target, att_t)?
        };
        let warp_flow =
            if opts.detach_completed_flow { g.tape.detach(completed) } else { completed };

        let warped_ref = g.tape.warp(nbr, warp_flow).map_err(PipelineError::Tensor)?;
        let warped_att_k = g.tape.warp(att_k, warp_flow).map_err(PipelineError::Tensor)?;
        let att_eff = effective_map(g, att_t, warped_att_k);

        let x = models.restoration.encode_inputs(g, target, att_t, warped_ref, att_eff);
        hidden = models.restoration.gru_step(g, hidden, x);
        let mask = models.restoration.blend_mask(g, hidden);
        blend = temporal_blend(g, mask, warped_ref, blend);
        let restored =
            if opts.skip_spatial { blend } else { models.restoration.spatial_restore(g, blend, hidden) };

        trace.attention_target.push(att_t);
        trace.attention_ref.push(att_k);
        trace.degraded_flows.push(fwd);
        trace.completed_flows.push(completed);
        trace.masks.push(mask);
        trace.blends.push(blend);
        trace.restored.push(restored);
        trace.output = restored;
    }
    Ok(trace)
}

/// What the sequence-refinement pass produced. `outputs[0]` is the first
/// input frame unchanged; per-iteration vectors hold one entry for each
/// refined frame (index t corresponds to `outputs[t + 1]`).
pub struct RefineTrace {
    pub outputs: Vec<TensorId>,
    pub degraded_flows: Vec<TensorId>,
    pub completed_flows: Vec<TensorId>,
    pub masks: Vec<TensorId>,
    pub blends: Vec<TensorId>,
}

/// Refine a restored sequence left to right: each frame is re-restored with
/// a single recurrent iteration whose reference is the previous *output*
/// (full backpropagation through time), with the attention input pinned to
/// zero. The hidden state carries across frames. Sequences shorter than
/// two frames pass through untouched.
pub fn refine_sequence<T, F>(
    models: &SequenceModels<T>,
    g: &mut Graph<'_, T>,
    frames: &[TensorId],
    flow_between: &mut F,
    opts: &RestoreOptions,
) -> Result<RefineTrace, PipelineError>
where
    T: Scalar,
    F: FnMut(&TensorData<T>, &TensorData<T>) -> Result<TensorData<T>, PipelineError>,
{
    let mut trace = RefineTrace {
        outputs: Vec::new(),
        degraded_flows: Vec::new(),
        completed_flows: Vec::new(),
        masks: Vec::new(),
        blends: Vec::new(),
    };
    if frames.len() < 2 {
        trace.outputs = frames.to_vec();
        return Ok(trace);
    }
    let shape = check_frame(g, frames[0], "frame")?;
    for &f in &frames[1..] {
        if check_frame(g, f, "frame")? != shape {
            return Err(PipelineError::Invalid("sequence frames must share a resolution".into()));
        }
    }

    trace.outputs.push(frames[0]);
    let mut hidden = g.input(RestorationNets::zero_hidden(shape.h, shape.w));
    let zero_att = g.input(TensorData::full(Shape::new(1, 1, shape.h, shape.w), T::from_f64(0.0)));

    for t in 1..frames.len() {
        let prev_out = trace.outputs[t - 1];
        let frame_data = g.tape.value(frames[t]).clone();
        let prev_data = g.tape.value(prev_out).clone();
        let flow = flow_between(&frame_data, &prev_data)?;
        let flow = g.input(flow);

        let completed = if opts.skip_completion {
            flow
        } else {
            complete_flow(&models.completion, g, flow, frames[t], zero_att)?
        };
        let warp_flow =
            if opts.detach_completed_flow { g.tape.detach(completed) } else { completed };

        let warped_prev = g.tape.warp(prev_out, warp_flow).map_err(PipelineError::Tensor)?;
        let warped_att = g.tape.warp(zero_att, warp_flow).map_err(PipelineError::Tensor)?;
        let att_eff = effective_map(g, zero_att, warped_att);

        let x = models.restoration.encode_inputs(g, frames[t], zero_att, warped_prev, att_eff);
        hidden = models.restoration.gru_step(g, hidden, x);
        let mask = models.restoration.blend_mask(g, hidden);
        let blend = temporal_blend(g, mask, warped_prev, frames[t]);
        let refined =
            if opts.skip_spatial { blend } else { models.restoration.spatial_restore(g, blend, hidden) };

        trace.degraded_flows.push(flow);
        trace.completed_flows.push(completed);
        trace.masks.push(mask);
        trace.blends.push(blend);
        trace.outputs.push(refined);
    }
    Ok(trace)
}

//! Training and batch inference: corpus-backed datasets with clip-consistent
//! random crops, the single-frame trainer, intermediate-output generation,
//! the sequence trainer, and clip-level inference hooks the evaluator and
//! CLI build on.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{PipelineError, TensorError};
use crate::losses::{
    bce_loss, fusion_loss, pyramid_perceptual_loss, stage1_total_loss, stage2_total_loss,
    temporal_loss,
};
use crate::nets::{l1_flow_loss, FeaturePyramid, Graph};
use crate::pipeline::{
    classical_flow, neighbor_order, refine_sequence, restore_frame, Models, RefineTrace,
    RestoreOptions, RestoreTrace, SequenceModels,
};
use crate::synth::corpus::{load_clip, load_manifest, LoadedClip};
use crate::synth::texture::splitmix64;
use crate::tensor::{Adam, GraphBinds, Scalar, Tape, TensorData, TensorId};

/// Seed of the frozen random filter bank behind the multi-scale feature
/// loss. Fixed independently of the run seed, so every training run scores
/// features in the same space.
pub const PERCEPTUAL_SEED: u64 = 0x66726f7a656e;

/// Pyramid levels for the classical flow estimator: three levels cover the
/// corpus' motion range; tiny frames fall back to two so the coarsest level
/// still fits a matching block.
pub fn default_flow_levels(h: usize, w: usize) -> usize {
    if h.min(w) >= 32 {
        3
    } else {
        2
    }
}

/// Cut the `h`×`w` window at (row `y0`, col `x0`) out of every channel.
pub fn crop_of<T: Scalar>(
    x: &TensorData<T>,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> TensorData<T> {
    assert!(
        y0 + h <= x.shape.h && x0 + w <= x.shape.w,
        "crop {h}x{w} at ({y0},{x0}) exceeds {}",
        x.shape
    );
    let mut out = TensorData::zeros(crate::tensor::Shape::new(x.shape.n, x.shape.c, h, w));
    for n in 0..x.shape.n {
        for c in 0..x.shape.c {
            for y in 0..h {
                for xx in 0..w {
                    *out.at_mut(n, c, y, xx) = x.at(n, c, y0 + y, x0 + xx);
                }
            }
        }
    }
    out
}

/// Fold an out-of-range index back into `[0, n)` by mirroring about the
/// edges without repeating the edge sample.
fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Grow a frame to the next multiple of `m` on both axes by reflecting
/// rows and columns past the bottom/right edges. Returns the input
/// unchanged when it already fits. Crop the result back to the original
/// size with [`crop_of`].
pub fn pad_reflect_to_multiple<T: Scalar>(x: &TensorData<T>, m: usize) -> TensorData<T> {
    let h = x.shape.h.div_ceil(m) * m;
    let w = x.shape.w.div_ceil(m) * m;
    if h == x.shape.h && w == x.shape.w {
        return x.clone();
    }
    let mut out = TensorData::zeros(crate::tensor::Shape::new(x.shape.n, x.shape.c, h, w));
    for n in 0..x.shape.n {
        for c in 0..x.shape.c {
            for y in 0..h {
                let sy = mirror_index(y as isize, x.shape.h);
                for xx in 0..w {
                    let sx = mirror_index(xx as isize, x.shape.w);
                    *out.at_mut(n, c, y, xx) = x.at(n, c, sy, sx);
                }
            }
        }
    }
    out
}

/// One split of an emitted corpus, fully resident in memory.
pub struct Dataset {
    pub clips: Vec<LoadedClip>,
    pub width: usize,
    pub height: usize,
    pub frames_per_clip: usize,
    /// Largest |t−k| with ground-truth flow on disk.
    pub flow_radius: usize,
}

impl Dataset {
    pub fn load(dir: &Path, split: &str) -> Result<Dataset, PipelineError> {
        let manifest = load_manifest(dir)?;
        let clips = manifest
            .clips_of_split(split)
            .map(|e| load_clip(dir, &manifest, e))
            .collect::<Result<Vec<_>, _>>()?;
        if clips.is_empty() {
            return Err(PipelineError::Invalid(format!("corpus at {} has no `{split}` clips", dir.display())));
        }
        Ok(Dataset {
            clips,
            width: manifest.width,
            height: manifest.height,
            frames_per_clip: manifest.frames_per_clip,
            flow_radius: manifest.neighbor_radius,
        })
    }

    fn check_trainable(&self, cfg: &TrainConfig) -> Result<(), PipelineError> {
        if cfg.crop > self.width || cfg.crop > self.height {
            return Err(PipelineError::Invalid(format!(
                "crop {} exceeds corpus frames ({}x{})",
                cfg.crop, self.width, self.height
            )));
        }
        if cfg.neighbor_radius > self.flow_radius {
            return Err(PipelineError::Invalid(format!(
                "neighbor radius {} has no ground-truth flows beyond {}",
                cfg.neighbor_radius, self.flow_radius
            )));
        }
        if self.frames_per_clip < 2 {
            return Err(PipelineError::Invalid("training needs clips of at least two frames".into()));
        }
        Ok(())
    }
}

/// Per-epoch means of the loss and its components. Stage one leaves
/// `temporal` at zero; stage two leaves `attention` at zero.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub attention: f64,
    pub flow: f64,
    pub fusion: f64,
    pub spatial: f64,
    pub temporal: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct LossParts {
    total: f64,
    attention: f64,
    flow: f64,
    fusion: f64,
    spatial: f64,
    temporal: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.attention += o.attention;
        self.flow += o.flow;
        self.fusion += o.fusion;
        self.spatial += o.spatial;
        self.temporal += o.temporal;
    }

    fn stats(&self, epoch: usize, n: usize) -> EpochStats {
        let d = n as f64;
        EpochStats {
            epoch,
            total: self.total / d,
            attention: self.attention / d,
            flow: self.flow / d,
            fusion: self.fusion / d,
            spatial: self.spatial / d,
            temporal: self.temporal / d,
        }
    }
}

fn item_f64(tape: &Tape<f32>, id: TensorId) -> Result<f64, TensorError> {
    Ok(tape.value(id).item()?.to_f64())
}

fn mean_terms<T: Scalar>(tape: &mut Tape<T>, terms: &[TensorId]) -> Result<TensorId, TensorError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// Distinct deterministic stream per (run seed, stage, epoch, step).
fn step_rng(seed: u64, stage: u64, epoch: usize, step: usize) -> ChaCha8Rng {
    let mixed = splitmix64(
        splitmix64(seed ^ (stage << 56)) ^ ((epoch as u64) << 20) ^ step as u64,
    );
    ChaCha8Rng::seed_from_u64(mixed)
}

fn missing_flow(t: usize, k: usize) -> PipelineError {
    PipelineError::Invalid(format!("corpus is missing the ground-truth flow {t}->{k}"))
}

fn stage_one_sample_loss(
    models: &Models<f32>,
    pyramid: &FeaturePyramid<f32>,
    cfg: &TrainConfig,
    tape: &mut Tape<f32>,
    binds: &mut GraphBinds,
    clip: &LoadedClip,
    t: usize,
    y0: usize,
    x0: usize,
    levels: usize,
) -> Result<(TensorId, LossParts), PipelineError> {
    let size = cfg.crop;
    let mut g = Graph::new(tape, &models.store, binds);
    let target = g.input(crop_of(&clip.contaminated[t], y0, x0, size, size));
    let order = neighbor_order(t, clip.contaminated.len(), cfg.neighbor_radius);
    let nbr_ids: Vec<TensorId> = order
        .iter()
        .map(|&k| g.input(crop_of(&clip.contaminated[k], y0, x0, size, size)))
        .collect();

    let mut flow_src = classical_flow::<f32>(levels);
    let trace = restore_frame(models, &mut g, target, &nbr_ids, &mut flow_src, &RestoreOptions::default())?;

    let clean_t = g.input(crop_of(&clip.clean[t], y0, x0, size, size));
    let mask_t = g.input(crop_of(&clip.masks[t], y0, x0, size, size));

    let mut att_terms = Vec::new();
    let mut flow_terms = Vec::new();
    for (i, &k) in order.iter().enumerate() {
        let mask_k = g.input(crop_of(&clip.masks[k], y0, x0, size, size));
        att_terms.push(bce_loss(g.tape, trace.attention_target[i], mask_t).map_err(PipelineError::Tensor)?);
        att_terms.push(bce_loss(g.tape, trace.attention_ref[i], mask_k).map_err(PipelineError::Tensor)?);
        let gt = clip.flows.get(&(t, k)).ok_or_else(|| missing_flow(t, k))?;
        let gt = g.input(crop_of(gt, y0, x0, size, size));
        flow_terms.push(l1_flow_loss(&mut g, trace.completed_flows[i], gt)?);
    }

    let att = mean_terms(g.tape, &att_terms).map_err(PipelineError::Tensor)?;
    let flow = mean_terms(g.tape, &flow_terms).map_err(PipelineError::Tensor)?;
    let fusion =
        fusion_loss(g.tape, &trace.blends, clean_t, cfg.gamma).map_err(PipelineError::Tensor)?;
    let spatial = pyramid_perceptual_loss(g.tape, pyramid, &trace.restored, clean_t)
        .map_err(PipelineError::Tensor)?;
    let total =
        stage1_total_loss(g.tape, att, flow, fusion, spatial, cfg.fusion_weight, cfg.spatial_weight)
            .map_err(PipelineError::Tensor)?;

    let parts = LossParts {
        total: item_f64(g.tape, total).map_err(PipelineError::Tensor)?,
        attention: item_f64(g.tape, att).map_err(PipelineError::Tensor)?,
        flow: item_f64(g.tape, flow).map_err(PipelineError::Tensor)?,
        fusion: item_f64(g.tape, fusion).map_err(PipelineError::Tensor)?,
        spatial: item_f64(g.tape, spatial).map_err(PipelineError::Tensor)?,
        temporal: 0.0,
    };
    Ok((total, parts))
}

/// Train the single-frame stage from scratch on `data`'s clips. `on_epoch`
/// runs after every epoch (checkpointing, logging); the loss curve is also
/// returned. Identical config and data give bit-identical results.
pub fn train_stage_one(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochStats, &Models<f32>) -> Result<(), PipelineError>,
) -> Result<(Models<f32>, Vec<EpochStats>), PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    data.check_trainable(cfg)?;

    let mut models = Models::<f32>::new(cfg.seed);
    let pyramid = FeaturePyramid::<f32>::new(PERCEPTUAL_SEED);
    let adam = Adam { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, ..Adam::default() };
    let levels = default_flow_levels(cfg.crop, cfg.crop);

    let mut curve = Vec::with_capacity(cfg.epochs_stage1);
    for epoch in 0..cfg.epochs_stage1 {
        let mut epoch_sum = LossParts::default();
        for step in 0..cfg.steps_per_epoch {
            let mut rng = step_rng(cfg.seed, 1, epoch, step);
            models.store.zero_grads();
            for _ in 0..cfg.batch {
                let clip = &data.clips[rng.gen_range(0..data.clips.len())];
                let t = rng.gen_range(0..clip.contaminated.len());
                let y0 = rng.gen_range(0..=(data.height - cfg.crop));
                let x0 = rng.gen_range(0..=(data.width - cfg.crop));

                let mut tape = Tape::new();
                let mut binds = GraphBinds::new(&models.store);
                let (loss, parts) = stage_one_sample_loss(
                    &models, &pyramid, cfg, &mut tape, &mut binds, clip, t, y0, x0, levels,
                )?;
                let grads = tape.backward(loss).map_err(PipelineError::Tensor)?;
                models
                    .store
                    .accumulate(&binds, &grads, 1.0 / cfg.batch as f64)
                    .map_err(PipelineError::Tensor)?;
                epoch_sum.add(&LossParts {
                    total: parts.total / cfg.batch as f64 / cfg.steps_per_epoch as f64,
                    attention: parts.attention / cfg.batch as f64 / cfg.steps_per_epoch as f64,
                    flow: parts.flow / cfg.batch as f64 / cfg.steps_per_epoch as f64,
                    fusion: parts.fusion / cfg.batch as f64 / cfg.steps_per_epoch as f64,
                    spatial: parts.spatial / cfg.batch as f64 / cfg.steps_per_epoch as f64,
                    temporal: 0.0,
                });
            }
            models.store.adam_step(&adam);
        }
        let stats = epoch_sum.stats(epoch, 1);
        on_epoch(&stats, &models)?;
        curve.push(stats);
    }
    Ok((models, curve))
}

/// Run the single-frame stage over one whole clip. `visit` sees every
/// frame's tape and trace before they are dropped, for metric extraction.
pub fn restore_clip_with<F>(
    models: &Models<f32>,
    frames: &[TensorData<f32>],
    radius: usize,
    levels: usize,
    opts: &RestoreOptions,
    mut visit: F,
) -> Result<Vec<TensorData<f32>>, PipelineError>
where
    F: FnMut(usize, &Tape<f32>, &RestoreTrace) -> Result<(), PipelineError>,
{
    let mut out = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&models.store);
        let mut g = Graph::new(&mut tape, &models.store, &mut binds);
        let target = g.input(frames[t].clone());
        let nbrs: Vec<TensorId> = neighbor_order(t, frames.len(), radius)
            .into_iter()
            .map(|k| g.input(frames[k].clone()))
            .collect();
        let mut flow_src = classical_flow::<f32>(levels);
        let trace = restore_frame(models, &mut g, target, &nbrs, &mut flow_src, opts)?;
        drop(g);
        visit(t, &tape, &trace)?;
        out.push(tape.value(trace.output).clone());
    }
    Ok(out)
}

/// Single-frame restoration of a whole clip, outputs only.
pub fn stage_one_outputs(
    models: &Models<f32>,
    frames: &[TensorData<f32>],
    radius: usize,
    levels: usize,
    opts: &RestoreOptions,
) -> Result<Vec<TensorData<f32>>, PipelineError> {
    restore_clip_with(models, frames, radius, levels, opts, |_, _, _| Ok(()))
}

/// Stage-one outputs for every clip of a dataset, in clip order.
pub fn generate_intermediate(
    models: &Models<f32>,
    data: &Dataset,
    radius: usize,
    levels: usize,
) -> Result<Vec<Vec<TensorData<f32>>>, PipelineError> {
    data.clips
        .iter()
        .map(|c| stage_one_outputs(models, &c.contaminated, radius, levels, &RestoreOptions::default()))
        .collect()
}

/// Run the sequence-refinement stage over one whole clip. `visit` sees the
/// single sequence graph before it is dropped.
pub fn refine_clip_with<F>(
    models: &SequenceModels<f32>,
    frames: &[TensorData<f32>],
    levels: usize,
    opts: &RestoreOptions,
    visit: F,
) -> Result<Vec<TensorData<f32>>, PipelineError>
where
    F: FnOnce(&Tape<f32>, &RefineTrace) -> Result<(), PipelineError>,
{
    let mut tape = Tape::new();
    let mut binds = GraphBinds::new(&models.store);
    let mut g = Graph::new(&mut tape, &models.store, &mut binds);
    let ids: Vec<TensorId> = frames.iter().map(|f| g.input(f.clone())).collect();
    let mut flow_src = classical_flow::<f32>(levels);
    let trace = refine_sequence(models, &mut g, &ids, &mut flow_src, opts)?;
    drop(g);
    visit(&tape, &trace)?;
    Ok(trace.outputs.iter().map(|&id| tape.value(id).clone()).collect())
}

/// Sequence refinement of a whole clip, outputs only.
pub fn stage_two_outputs(
    models: &SequenceModels<f32>,
    frames: &[TensorData<f32>],
    levels: usize,
) -> Result<Vec<TensorData<f32>>, PipelineError> {
    refine_clip_with(models, frames, levels, &RestoreOptions::default(), |_, _| Ok(()))
}

#[allow(clippy::too_many_arguments)]
fn stage_two_window_loss(
    models: &SequenceModels<f32>,
    pyramid: &FeaturePyramid<f32>,
    cfg: &TrainConfig,
    tape: &mut Tape<f32>,
    binds: &mut GraphBinds,
    p_frames: &[TensorData<f32>],
    clip: &LoadedClip,
    t0: usize,
    len: usize,
    y0: usize,
    x0: usize,
    levels: usize,
) -> Result<(TensorId, LossParts), PipelineError> {
    let size = cfg.crop;
    let mut g = Graph::new(tape, &models.store, binds);
    let frames: Vec<TensorId> =
        (t0..t0 + len).map(|t| g.input(crop_of(&p_frames[t], y0, x0, size, size))).collect();
    let cleans: Vec<TensorId> =
        (t0..t0 + len).map(|t| g.input(crop_of(&clip.clean[t], y0, x0, size, size))).collect();

    let mut flow_src = classical_flow::<f32>(levels);
    let trace = refine_sequence(models, &mut g, &frames, &mut flow_src, &RestoreOptions::default())?;

    let mut flow_terms = Vec::new();
    let mut fusion_terms = Vec::new();
    let mut spatial_terms = Vec::new();
    let mut step_flows = Vec::new();
    for i in 1..len {
        let t = t0 + i;
        let gt = clip.flows.get(&(t, t - 1)).ok_or_else(|| missing_flow(t, t - 1))?;
        let gt = g.input(crop_of(gt, y0, x0, size, size));
        flow_terms.push(l1_flow_loss(&mut g, trace.completed_flows[i - 1], gt)?);
        fusion_terms.push(
            fusion_loss(g.tape, &[trace.blends[i - 1]], cleans[i], cfg.gamma)
                .map_err(PipelineError::Tensor)?,
        );
        spatial_terms.push(
            pyramid_perceptual_loss(g.tape, pyramid, &[trace.outputs[i]], cleans[i])
                .map_err(PipelineError::Tensor)?,
        );
        step_flows.push(gt);
    }

    let flow = mean_terms(g.tape, &flow_terms).map_err(PipelineError::Tensor)?;
    let fusion = mean_terms(g.tape, &fusion_terms).map_err(PipelineError::Tensor)?;
    let spatial = mean_terms(g.tape, &spatial_terms).map_err(PipelineError::Tensor)?;
    let temporal = temporal_loss(g.tape, &trace.outputs, &cleans, &step_flows, cfg.mu)
        .map_err(PipelineError::Tensor)?;
    let total = stage2_total_loss(
        g.tape,
        flow,
        fusion,
        spatial,
        temporal,
        cfg.fusion_weight,
        cfg.spatial_weight,
        cfg.temporal_weight,
    )
    .map_err(PipelineError::Tensor)?;

    let parts = LossParts {
        total: item_f64(g.tape, total).map_err(PipelineError::Tensor)?,
        attention: 0.0,
        flow: item_f64(g.tape, flow).map_err(PipelineError::Tensor)?,
        fusion: item_f64(g.tape, fusion).map_err(PipelineError::Tensor)?,
        spatial: item_f64(g.tape, spatial).map_err(PipelineError::Tensor)?,
        temporal: item_f64(g.tape, temporal).map_err(PipelineError::Tensor)?,
    };
    Ok((total, parts))
}

/// Fine-tune the sequence stage, starting from trained single-frame
/// weights, on windows of that stage's outputs (`p_clips`, aligned with
/// `data.clips`). Full backpropagation through time across each window.
pub fn train_stage_two(
    cfg: &TrainConfig,
    stage_one: &Models<f32>,
    p_clips: &[Vec<TensorData<f32>>],
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochStats, &SequenceModels<f32>) -> Result<(), PipelineError>,
) -> Result<(SequenceModels<f32>, Vec<EpochStats>), PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    data.check_trainable(cfg)?;
    if p_clips.len() != data.clips.len() {
        return Err(PipelineError::Invalid(format!(
            "{} intermediate clips for {} dataset clips",
            p_clips.len(),
            data.clips.len()
        )));
    }
    for (p, c) in p_clips.iter().zip(&data.clips) {
        if p.len() != c.clean.len() {
            return Err(PipelineError::Invalid(format!(
                "intermediate clip `{}` has {} frames, expected {}",
                c.id,
                p.len(),
                c.clean.len()
            )));
        }
    }

    let mut models = SequenceModels::from_stage_one(stage_one)?;
    let pyramid = FeaturePyramid::<f32>::new(PERCEPTUAL_SEED);
    let adam = Adam { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, ..Adam::default() };
    let levels = default_flow_levels(cfg.crop, cfg.crop);
    let window = (2 * cfg.neighbor_radius + 1).min(data.frames_per_clip);

    let mut curve = Vec::with_capacity(cfg.epochs_stage2);
    for epoch in 0..cfg.epochs_stage2 {
        let mut epoch_sum = LossParts::default();
        for step in 0..cfg.steps_per_epoch {
            let mut rng = step_rng(cfg.seed, 2, epoch, step);
            models.store.zero_grads();
            for _ in 0..cfg.batch {
                let ci = rng.gen_range(0..data.clips.len());
                let clip = &data.clips[ci];
                let t0 = rng.gen_range(0..=(data.frames_per_clip - window));
                let y0 = rng.gen_range(0..=(data.height - cfg.crop));
                let x0 = rng.gen_range(0..=(data.width - cfg.crop));

                let mut tape = Tape::new();
                let mut binds = GraphBinds::new(&models.store);
                let (loss, parts) = stage_two_window_loss(
                    &models, &pyramid, cfg, &mut tape, &mut binds, &p_clips[ci], clip, t0, window,
                    y0, x0, levels,
                )?;
                let grads = tape.backward(loss).map_err(PipelineError::Tensor)?;
                models
                    .store
                    .accumulate(&binds, &grads, 1.0 / cfg.batch as f64)
                    .map_err(PipelineError::Tensor)?;
                epoch_sum.add(&LossParts {
                    total: parts.total / (cfg.batch * cfg.steps_per_epoch) as f64,
                    attention: 0.0,
                    flow: parts.flow / (cfg.batch * cfg.steps_per_epoch) as f64,
                    fusion: parts.fusion / (cfg.batch * cfg.steps_per_epoch) as f64,
                    spatial: parts.spatial / (cfg.batch * cfg.steps_per_epoch) as f64,
                    temporal: parts.temporal / (cfg.batch * cfg.steps_per_epoch) as f64,
                });
            }
            models.store.adam_step(&adam);
        }
        let stats = epoch_sum.stats(epoch, 1);
        on_epoch(&stats, &models)?;
        curve.push(stats);
    }
    Ok((models, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn export_bits(store: &crate::tensor::ParamStore<f32>) -> Vec<u32> {
        store.export().into_iter().flat_map(|(_, _, d)| d.into_iter().map(f32::to_bits)).collect()
    }
    use crate::synth::corpus::{clip_seed, generate_clip, CorpusParams};
    use crate::synth::gt_flow;
    use crate::tensor::Shape;
    use std::collections::HashMap;

    fn tiny_params(seed: u64, clips: usize) -> CorpusParams {
        CorpusParams {
            seed,
            train_clips: clips,
            test_clips: 0,
            frames_per_clip: 5,
            width: 32,
            height: 32,
            ..CorpusParams::default()
        }
    }

    /// Build a Dataset in memory, skipping the disk round trip.
    fn tiny_dataset(seed: u64, clips: usize) -> Dataset {
        let params = tiny_params(seed, clips);
        let mut loaded = Vec::new();
        for idx in 0..clips {
            let c = generate_clip(&params, clip_seed(params.seed, idx)).unwrap();
            let mut flows = HashMap::new();
            for t in 0..params.frames_per_clip {
                for k in t.saturating_sub(params.neighbor_radius)
                    ..=(t + params.neighbor_radius).min(params.frames_per_clip - 1)
                {
                    if k != t {
                        flows.insert((t, k), gt_flow(&c.scene, t, k));
                    }
                }
            }
            loaded.push(LoadedClip {
                id: format!("clip_{idx:04}"),
                contaminated: c.contaminated,
                clean: c.clean,
                masks: c.masks,
                velocity: c.scene.velocity,
                flows,
            });
        }
        Dataset {
            clips: loaded,
            width: params.width,
            height: params.height,
            frames_per_clip: params.frames_per_clip,
            flow_radius: params.neighbor_radius,
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            crop: 24,
            batch: 2,
            steps_per_epoch: 1,
            epochs_stage1: 1,
            epochs_stage2: 1,
            seed: 5,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn crop_cuts_the_right_window() {
        let mut x = TensorData::<f32>::zeros(Shape::new(1, 2, 4, 5));
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let c = crop_of(&x, 1, 2, 2, 3);
        assert_eq!(c.shape, Shape::new(1, 2, 2, 3));
        assert_eq!(c.at(0, 0, 0, 0), x.at(0, 0, 1, 2));
        assert_eq!(c.at(0, 1, 1, 2), x.at(0, 1, 2, 4));
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_the_edge() {
        let mut x = TensorData::<f32>::zeros(Shape::new(1, 1, 3, 5));
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let p = pad_reflect_to_multiple(&x, 4);
        assert_eq!(p.shape, Shape::new(1, 1, 4, 8));
        // Row 3 mirrors row 1; columns 5..8 mirror columns 3, 2, 1.
        assert_eq!(p.at(0, 0, 3, 0), x.at(0, 0, 1, 0));
        assert_eq!(p.at(0, 0, 0, 5), x.at(0, 0, 0, 3));
        assert_eq!(p.at(0, 0, 0, 6), x.at(0, 0, 0, 2));
        assert_eq!(p.at(0, 0, 0, 7), x.at(0, 0, 0, 1));
        // Cropping back recovers the original exactly.
        let back = crop_of(&p, 0, 0, 3, 5);
        assert_eq!(back.data, x.data);
        // Already-aligned input passes through untouched.
        let aligned = TensorData::<f32>::zeros(Shape::new(1, 1, 4, 8));
        assert_eq!(pad_reflect_to_multiple(&aligned, 4).shape, aligned.shape);
    }

    #[test]
    fn one_stage_one_step_is_deterministic() {
        let data = tiny_dataset(3, 2);
        let cfg = tiny_config();
        let (a, curve_a) = train_stage_one(&cfg, &data, |_, _| Ok(())).unwrap();
        let (b, curve_b) = train_stage_one(&cfg, &data, |_, _| Ok(())).unwrap();
        assert_eq!(curve_a.len(), 1);
        assert!(curve_a[0].total.is_finite());
        assert_eq!(curve_a[0].total.to_bits(), curve_b[0].total.to_bits());
        assert_eq!(export_bits(&a.store), export_bits(&b.store));

        let nudged = TrainConfig { seed: 6, ..cfg };
        let (c, _) = train_stage_one(&nudged, &data, |_, _| Ok(())).unwrap();
        assert_ne!(export_bits(&a.store), export_bits(&c.store));
    }

    #[test]
    fn stage_one_loss_falls_when_overfitting_a_clip() {
        let data = tiny_dataset(11, 1);
        let cfg = TrainConfig {
            epochs_stage1: 6,
            steps_per_epoch: 2,
            batch: 1,
            ..tiny_config()
        };
        let (_, curve) = train_stage_one(&cfg, &data, |_, _| Ok(())).unwrap();
        let first = curve[0].total;
        let last = (curve[4].total + curve[5].total) / 2.0;
        assert!(
            last < first,
            "loss failed to fall while overfitting one clip: {first} -> {last}"
        );
        for s in &curve {
            assert!(s.total.is_finite());
            assert_eq!(s.temporal, 0.0);
        }
    }

    #[test]
    fn trainer_rejects_incompatible_corpora() {
        let data = tiny_dataset(3, 1);
        let big_crop = TrainConfig { crop: 64, ..tiny_config() };
        assert!(train_stage_one(&big_crop, &data, |_, _| Ok(())).is_err());
        let wide_radius = TrainConfig { neighbor_radius: 4, ..tiny_config() };
        assert!(train_stage_one(&wide_radius, &data, |_, _| Ok(())).is_err());
    }

    #[test]
    fn intermediate_generation_is_deterministic_and_complete() {
        let data = tiny_dataset(7, 2);
        let models = Models::<f32>::new(2);
        let a = generate_intermediate(&models, &data, 1, 2).unwrap();
        let b = generate_intermediate(&models, &data, 1, 2).unwrap();
        assert_eq!(a.len(), data.clips.len());
        for (clip_a, clip_b) in a.iter().zip(&b) {
            assert_eq!(clip_a.len(), data.frames_per_clip);
            for (fa, fb) in clip_a.iter().zip(clip_b) {
                assert_eq!(fa.data, fb.data);
            }
        }
    }

    #[test]
    fn stage_two_trains_deterministically_from_stage_one_weights() {
        let data = tiny_dataset(13, 2);
        let stage_one = Models::<f32>::new(4);
        // Feeding the contaminated frames as "intermediate" inputs keeps the
        // test independent of stage-one inference time.
        let p_clips: Vec<Vec<TensorData<f32>>> =
            data.clips.iter().map(|c| c.contaminated.clone()).collect();
        let cfg = TrainConfig { batch: 1, ..tiny_config() };
        let (a, curve_a) = train_stage_two(&cfg, &stage_one, &p_clips, &data, |_, _| Ok(())).unwrap();
        let (b, curve_b) = train_stage_two(&cfg, &stage_one, &p_clips, &data, |_, _| Ok(())).unwrap();
        assert_eq!(curve_a[0].total.to_bits(), curve_b[0].total.to_bits());
        assert!(curve_a[0].temporal > 0.0, "temporal component must be logged");
        assert_eq!(export_bits(&a.store), export_bits(&b.store));

        // Refinement leaves the first frame untouched by construction.
        let outs = stage_two_outputs(&a, &p_clips[0], 2).unwrap();
        assert_eq!(outs[0].data, p_clips[0][0].data);
        assert_eq!(outs.len(), p_clips[0].len());
    }

    #[test]
    fn stage_two_rejects_misaligned_intermediates() {
        let data = tiny_dataset(17, 1);
        let stage_one = Models::<f32>::new(4);
        let err = train_stage_two(&tiny_config(), &stage_one, &[], &data, |_, _| Ok(()));
        assert!(err.is_err());
        let mut p: Vec<Vec<TensorData<f32>>> =
            data.clips.iter().map(|c| c.contaminated.clone()).collect();
        p[0].pop();
        assert!(train_stage_two(&tiny_config(), &stage_one, &p, &data, |_, _| Ok(())).is_err());
    }

    #[test]
    fn clip_restoration_visits_every_frame() {
        let data = tiny_dataset(19, 1);
        let models = Models::<f32>::new(8);
        let mut seen = Vec::new();
        let outs = restore_clip_with(
            &models,
            &data.clips[0].contaminated,
            2,
            2,
            &RestoreOptions::default(),
            |t, tape, trace| {
                assert!(!trace.restored.is_empty());
                assert!(tape.value(trace.output).data.iter().all(|v| v.is_finite()));
                seen.push(t);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(outs.len(), 5);
        // Interior frames see the full neighbor set, boundary frames fewer.
        assert_eq!(neighbor_order(2, 5, 2).len(), 4);
        assert_eq!(neighbor_order(0, 5, 2).len(), 2);
    }
}

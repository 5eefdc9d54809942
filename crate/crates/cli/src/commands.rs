//! Implementations of the CLI subcommands.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use lensclear_core::checkpoint::save_checkpoint;
use lensclear_core::config::TrainConfig;
use lensclear_core::error::{IoFormatError, PipelineError};
use lensclear_core::flow::epe;
use lensclear_core::io::{read_rawf32, write_gray_png, write_rawf32, write_rgb_png};
use lensclear_core::metrics::{warp_error, ClipMetrics, MetricsReport};
use lensclear_core::pipeline::{RestoreOptions, RestoreTrace};
use lensclear_core::synth::corpus::{emit_corpus, CorpusParams};
use lensclear_core::tensor::{gradcheck::standard_battery, Tape, TensorData};
use lensclear_core::train::{
    crop_of, default_flow_levels, generate_intermediate, pad_reflect_to_multiple,
    restore_clip_with, stage_one_outputs, stage_two_outputs, train_stage_one, train_stage_two,
    Dataset, EpochStats,
};

use crate::frames::{
    load_sequence, load_single, read_frame_dir, write_frame_dir, STAGE_MULTI, STAGE_SINGLE,
};

/// Index written next to the single-frame stage's outputs; the multi-frame
/// trainer consumes it.
#[derive(Debug, Serialize, Deserialize)]
pub struct IntermediateManifest {
    pub split: String,
    pub width: usize,
    pub height: usize,
    /// Epoch count of the checkpoint that produced these frames.
    pub source_epoch: usize,
    pub clips: Vec<IntermediateClip>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IntermediateClip {
    pub id: String,
    /// Raw float32 frames, the data of record.
    pub frames_raw: Vec<String>,
    /// 8-bit previews of the same frames.
    pub frames_png: Vec<String>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            TrainConfig::from_text(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::desk(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_epoch(stage: &str, s: &EpochStats) {
    log::info!(
        "{stage} epoch {:>3}  total {:.4}  attention {:.4}  flow {:.4}  fusion {:.4}  spatial {:.4}  temporal {:.4}",
        s.epoch, s.total, s.attention, s.flow, s.fusion, s.spatial, s.temporal
    );
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    out: &Path,
    seed: Option<u64>,
    train_clips: Option<usize>,
    test_clips: Option<usize>,
    frames: Option<usize>,
    width: Option<usize>,
    height: Option<usize>,
    radius: Option<usize>,
) -> Result<()> {
    let mut params = CorpusParams::default();
    if let Some(v) = seed {
        params.seed = v;
    }
    if let Some(v) = train_clips {
        params.train_clips = v;
    }
    if let Some(v) = test_clips {
        params.test_clips = v;
    }
    if let Some(v) = frames {
        params.frames_per_clip = v;
    }
    if let Some(v) = width {
        params.width = v;
    }
    if let Some(v) = height {
        params.height = v;
    }
    if let Some(v) = radius {
        params.neighbor_radius = v;
    }
    let t0 = Instant::now();
    let manifest = emit_corpus(&params, out)?;
    log::info!(
        "wrote {} clips ({} train, {} test), {} frames each at {}x{}, to {} in {:.1}s",
        manifest.clips.len(),
        params.train_clips,
        params.test_clips,
        manifest.frames_per_clip,
        manifest.width,
        manifest.height,
        out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn train_single(
    corpus: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let data = Dataset::load(corpus, "train")?;
    log::info!(
        "single-frame stage: {} clips, {} epochs x {} steps x batch {}, crop {}, seed {}",
        data.clips.len(),
        cfg.epochs_stage1,
        cfg.steps_per_epoch,
        cfg.batch,
        cfg.crop,
        cfg.seed
    );
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;

    let t0 = Instant::now();
    let (models, curve) = train_stage_one(&cfg, &data, |stats, m| {
        log_epoch("single", stats);
        let p = ckpt_dir.join(format!("single_epoch_{:04}.ckpt", stats.epoch));
        save_checkpoint(&p, &m.store, STAGE_SINGLE, stats.epoch, &cfg)?;
        Ok(())
    })?;
    let final_path = out.join("single.ckpt");
    save_checkpoint(&final_path, &models.store, STAGE_SINGLE, cfg.epochs_stage1, &cfg)?;
    write_json(&out.join("loss_curve_single.json"), &curve)?;
    log::info!(
        "trained in {:.1}s; final loss {:.4}; wrote {}",
        t0.elapsed().as_secs_f64(),
        curve.last().map(|s| s.total).unwrap_or(f64::NAN),
        final_path.display()
    );
    Ok(())
}

pub fn gen_intermediate(corpus: &Path, checkpoint: &Path, out: &Path, split: &str) -> Result<()> {
    let (models, manifest) = load_single(checkpoint)?;
    let data = Dataset::load(corpus, split)?;
    let levels = default_flow_levels(data.height, data.width);
    let radius = manifest.config.neighbor_radius;

    log::info!(
        "restoring {} `{split}` clips with the epoch-{} single-frame model (radius {radius})",
        data.clips.len(),
        manifest.epoch
    );
    let t0 = Instant::now();
    let outputs = generate_intermediate(&models, &data, radius, levels)?;

    let mut clips = Vec::with_capacity(outputs.len());
    for (clip, frames) in data.clips.iter().zip(&outputs) {
        let dir = out.join(&clip.id);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut raw = Vec::new();
        let mut png = Vec::new();
        for (i, f) in frames.iter().enumerate() {
            let rel_raw = format!("{}/frame_{i:04}.raw", clip.id);
            let rel_png = format!("{}/frame_{i:04}.png", clip.id);
            write_rawf32(&out.join(&rel_raw), f)?;
            write_rgb_png(&out.join(&rel_png), f)?;
            raw.push(rel_raw);
            png.push(rel_png);
        }
        clips.push(IntermediateClip { id: clip.id.clone(), frames_raw: raw, frames_png: png });
    }
    let im = IntermediateManifest {
        split: split.to_string(),
        width: data.width,
        height: data.height,
        source_epoch: manifest.epoch,
        clips,
    };
    write_json(&out.join("intermediate.json"), &im)?;
    log::info!(
        "wrote {} restored clips to {} in {:.1}s",
        im.clips.len(),
        out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn train_multi(
    corpus: &Path,
    intermediate: &Path,
    checkpoint: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let (stage_one, _) = load_single(checkpoint)?;
    let data = Dataset::load(corpus, "train")?;

    let im_path = intermediate.join("intermediate.json");
    let im: IntermediateManifest = serde_json::from_str(
        &fs::read_to_string(&im_path).with_context(|| format!("reading {}", im_path.display()))?,
    )
    .with_context(|| format!("parsing {}", im_path.display()))?;
    if im.split != "train" {
        bail!("{} holds the `{}` split; the multi-frame stage trains on `train`", im_path.display(), im.split);
    }
    let by_id: HashMap<&str, &IntermediateClip> =
        im.clips.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut p_clips = Vec::with_capacity(data.clips.len());
    for clip in &data.clips {
        let entry = by_id.get(clip.id.as_str()).ok_or_else(|| {
            anyhow::anyhow!("intermediate set lacks clip `{}`; regenerate it", clip.id)
        })?;
        let frames = entry
            .frames_raw
            .iter()
            .map(|rel| read_rawf32(&intermediate.join(rel), 3, im.height, im.width))
            .collect::<Result<Vec<_>, _>>()?;
        p_clips.push(frames);
    }

    log::info!(
        "multi-frame stage: {} clips, {} epochs x {} steps x batch {}, crop {}, seed {}",
        data.clips.len(),
        cfg.epochs_stage2,
        cfg.steps_per_epoch,
        cfg.batch,
        cfg.crop,
        cfg.seed
    );
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;

    let t0 = Instant::now();
    let (models, curve) = train_stage_two(&cfg, &stage_one, &p_clips, &data, |stats, m| {
        log_epoch("multi", stats);
        let p = ckpt_dir.join(format!("multi_epoch_{:04}.ckpt", stats.epoch));
        save_checkpoint(&p, &m.store, STAGE_MULTI, stats.epoch, &cfg)?;
        Ok(())
    })?;
    let final_path = out.join("multi.ckpt");
    save_checkpoint(&final_path, &models.store, STAGE_MULTI, cfg.epochs_stage2, &cfg)?;
    write_json(&out.join("loss_curve_multi.json"), &curve)?;
    log::info!(
        "trained in {:.1}s; final loss {:.4} (temporal {:.4}); wrote {}",
        t0.elapsed().as_secs_f64(),
        curve.last().map(|s| s.total).unwrap_or(f64::NAN),
        curve.last().map(|s| s.temporal).unwrap_or(f64::NAN),
        final_path.display()
    );
    Ok(())
}

/// Dump per-iteration internals of one restored frame as image panels.
fn write_panels(
    root: &Path,
    t: usize,
    tape: &Tape<f32>,
    trace: &RestoreTrace,
    oh: usize,
    ow: usize,
) -> Result<(), PipelineError> {
    let dir = root.join(format!("frame_{t:04}"));
    fs::create_dir_all(&dir).map_err(|e| IoFormatError::io(&dir, e))?;
    let cropped = |id| crop_of(tape.value(id), 0, 0, oh, ow);
    for i in 0..trace.masks.len() {
        write_gray_png(&dir.join(format!("iter_{i}_attention.png")), &cropped(trace.attention_target[i]))?;
        write_gray_png(&dir.join(format!("iter_{i}_mask.png")), &cropped(trace.masks[i]))?;
        write_rgb_png(&dir.join(format!("iter_{i}_blend.png")), &cropped(trace.blends[i]))?;
        write_rgb_png(&dir.join(format!("iter_{i}_restored.png")), &cropped(trace.restored[i]))?;
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[allow(clippy::too_many_arguments)]
pub fn infer(
    input: &Path,
    prefix: Option<&str>,
    checkpoint: &Path,
    multi: Option<&Path>,
    out: &Path,
    clean: Option<&Path>,
    clean_prefix: Option<&str>,
    debug_panels: bool,
) -> Result<()> {
    let (models, manifest) = load_single(checkpoint)?;
    let frames = read_frame_dir(input, prefix)?;
    let (oh, ow) = (frames[0].shape.h, frames[0].shape.w);
    let padded: Vec<TensorData<f32>> =
        frames.iter().map(|f| pad_reflect_to_multiple(f, 8)).collect();
    let (ph, pw) = (padded[0].shape.h, padded[0].shape.w);
    if (ph, pw) != (oh, ow) {
        log::info!("padding {ow}x{oh} frames to {pw}x{ph} by edge reflection");
    }
    let radius = manifest.config.neighbor_radius;
    let levels = default_flow_levels(ph, pw);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut per_frame_ms = Vec::with_capacity(frames.len());
    let debug_root = out.join("debug");
    let mut last = Instant::now();
    let p_padded = restore_clip_with(
        &models,
        &padded,
        radius,
        levels,
        &RestoreOptions::default(),
        |t, tape, trace| {
            per_frame_ms.push(last.elapsed().as_secs_f64() * 1e3);
            if debug_panels {
                write_panels(&debug_root, t, tape, trace, oh, ow)?;
            }
            last = Instant::now();
            Ok(())
        },
    )?;
    let p_frames: Vec<TensorData<f32>> =
        p_padded.iter().map(|f| crop_of(f, 0, 0, oh, ow)).collect();
    write_frame_dir(&out.join("single"), "p", &p_frames)?;
    log::info!(
        "single-frame stage: {:.1} ms/frame over {} frames",
        mean(&per_frame_ms),
        frames.len()
    );

    let mut timing = serde_json::json!({
        "frames": frames.len(),
        "single_stage_ms_per_frame": per_frame_ms,
        "single_stage_mean_ms_per_frame": mean(&per_frame_ms),
    });

    let mut final_frames = p_frames.clone();
    if let Some(mp) = multi {
        let (seq, _) = load_sequence(mp)?;
        let t0 = Instant::now();
        let o_padded = stage_two_outputs(&seq, &p_padded, levels)?;
        let total_ms = t0.elapsed().as_secs_f64() * 1e3;
        let o_frames: Vec<TensorData<f32>> =
            o_padded.iter().map(|f| crop_of(f, 0, 0, oh, ow)).collect();
        write_frame_dir(&out.join("multi"), "o", &o_frames)?;
        log::info!(
            "multi-frame stage: {:.1} ms/frame over {} frames",
            total_ms / frames.len() as f64,
            frames.len()
        );
        timing["multi_stage_total_ms"] = serde_json::json!(total_ms);
        timing["multi_stage_mean_ms_per_frame"] =
            serde_json::json!(total_ms / frames.len() as f64);
        final_frames = o_frames;
    }
    write_json(&out.join("timing.json"), &timing)?;

    if let Some(cdir) = clean {
        let cleans = read_frame_dir(cdir, clean_prefix)?;
        if cleans.len() != frames.len() || cleans[0].shape != frames[0].shape {
            bail!(
                "clean frames in {} do not match the input clip's count or size",
                cdir.display()
            );
        }
        let mut scores = serde_json::Map::new();
        let input_m = ClipMetrics::score("input", &frames, &cleans)?;
        let single_m = ClipMetrics::score("single", &p_frames, &cleans)?;
        log::info!("input PSNR {:.2} dB, SSIM {:.4}", input_m.psnr.mean, input_m.ssim.mean);
        log::info!("single-frame PSNR {:.2} dB, SSIM {:.4}", single_m.psnr.mean, single_m.ssim.mean);
        scores.insert("input".into(), serde_json::to_value(&input_m)?);
        scores.insert("single".into(), serde_json::to_value(&single_m)?);
        if multi.is_some() {
            let multi_m = ClipMetrics::score("multi", &final_frames, &cleans)?;
            log::info!("multi-frame PSNR {:.2} dB, SSIM {:.4}", multi_m.psnr.mean, multi_m.ssim.mean);
            scores.insert("multi".into(), serde_json::to_value(&multi_m)?);
        }
        write_json(&out.join("metrics.json"), &serde_json::Value::Object(scores))?;
    }
    Ok(())
}

fn report_line(name: &str, r: &MetricsReport) {
    let warp = r
        .warp_error
        .as_ref()
        .map(|a| format!("  warp {:.5}", a.mean))
        .unwrap_or_default();
    let epe = r.epe.as_ref().map(|a| format!("  epe {:.3}", a.mean)).unwrap_or_default();
    log::info!(
        "{name}: PSNR {:.2}±{:.2} dB  SSIM {:.4}{warp}{epe}",
        r.psnr.mean,
        r.psnr.std,
        r.ssim.mean
    );
}

fn write_report(out: &Path, name: &str, r: &MetricsReport) -> Result<()> {
    fs::write(out.join(format!("report_{name}.json")), r.to_json())
        .with_context(|| format!("writing report_{name}.json"))?;
    fs::write(out.join(format!("report_{name}.csv")), r.to_csv())
        .with_context(|| format!("writing report_{name}.csv"))?;
    report_line(name, r);
    Ok(())
}

pub fn eval(
    corpus: &Path,
    checkpoint: &Path,
    multi: Option<&Path>,
    out: &Path,
    split: &str,
    ablations: bool,
) -> Result<()> {
    let (models, manifest) = load_single(checkpoint)?;
    let data = Dataset::load(corpus, split)?;
    let radius = manifest.config.neighbor_radius;
    let levels = default_flow_levels(data.height, data.width);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    log::info!("evaluating {} `{split}` clips (radius {radius})", data.clips.len());

    let mut input_clips = Vec::new();
    let mut single_clips = Vec::new();
    let mut p_all = Vec::new();
    for clip in &data.clips {
        let mut epe_sum = 0.0;
        let mut epe_n = 0usize;
        let p = restore_clip_with(
            &models,
            &clip.contaminated,
            radius,
            levels,
            &RestoreOptions::default(),
            |t, tape, trace| {
                // First iteration of an interior frame handles neighbor t−1.
                if t >= 1 && !trace.completed_flows.is_empty() {
                    if let Some(gt) = clip.flows.get(&(t, t - 1)) {
                        let est = tape.value(trace.completed_flows[0]);
                        epe_sum += epe(est, gt, None)?;
                        epe_n += 1;
                    }
                }
                Ok(())
            },
        )?;

        let mut cm = ClipMetrics::score(&clip.id, &p, &clip.clean)?;
        cm.warp_error = Some(warp_error(&p, levels)?);
        if epe_n > 0 {
            cm.epe = Some(epe_sum / epe_n as f64);
        }
        single_clips.push(cm);

        let mut im = ClipMetrics::score(&clip.id, &clip.contaminated, &clip.clean)?;
        im.warp_error = Some(warp_error(&clip.contaminated, levels)?);
        input_clips.push(im);
        p_all.push(p);
    }
    write_report(out, "input", &MetricsReport::from_clips(input_clips))?;
    write_report(out, "single", &MetricsReport::from_clips(single_clips))?;

    if let Some(mp) = multi {
        let (seq, _) = load_sequence(mp)?;
        let mut multi_clips = Vec::new();
        for (clip, p) in data.clips.iter().zip(&p_all) {
            let o = stage_two_outputs(&seq, p, levels)?;
            let mut cm = ClipMetrics::score(&clip.id, &o, &clip.clean)?;
            cm.warp_error = Some(warp_error(&o, levels)?);
            multi_clips.push(cm);
        }
        write_report(out, "multi", &MetricsReport::from_clips(multi_clips))?;
    }

    if ablations {
        let toggles: [(&str, RestoreOptions); 3] = [
            ("zero_attention", RestoreOptions { zero_attention: true, ..Default::default() }),
            ("skip_completion", RestoreOptions { skip_completion: true, ..Default::default() }),
            ("skip_spatial", RestoreOptions { skip_spatial: true, ..Default::default() }),
        ];
        for (name, opts) in &toggles {
            let mut clips = Vec::new();
            for clip in &data.clips {
                let p = stage_one_outputs(&models, &clip.contaminated, radius, levels, opts)?;
                clips.push(ClipMetrics::score(&clip.id, &p, &clip.clean)?);
            }
            write_report(out, name, &MetricsReport::from_clips(clips))?;
        }
    }
    Ok(())
}

pub fn gradcheck(seed: u64) -> Result<()> {
    let reports = standard_battery(seed)?;
    let mut failed = 0usize;
    for r in &reports {
        println!("{r}");
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", reports.len());
    }
    log::info!("all {} gradient checks passed", reports.len());
    Ok(())
}

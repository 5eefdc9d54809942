//! Corpus generation: paired (contaminated, clean) clips with ground-truth
//! masks and flows written to a directory tree plus a JSON manifest.

use super::contaminant::{apply_contaminants, derive_gt_attention, BlobSpec, ContaminantSpec};
use super::scene::{gen_background_clip, gt_flow, SceneSpec};
use super::texture::splitmix64;
use crate::error::{IoFormatError, PipelineError};
use crate::io::{flo, png, rawf32};
use crate::tensor::TensorData;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

/// Knobs for corpus generation. Defaults are the desk-scale corpus used by
/// the integration tests.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusParams {
    pub seed: u64,
    pub train_clips: usize,
    pub test_clips: usize,
    pub frames_per_clip: usize,
    pub width: usize,
    pub height: usize,
    /// Neighbor radius N: ground-truth flows are emitted for |t - k| <= N.
    pub neighbor_radius: usize,
    /// Alpha threshold tau for the binary ground-truth attention.
    pub mask_threshold: f32,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Accepted band for the per-clip mean contaminated-pixel fraction.
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            seed: 7,
            train_clips: 32,
            test_clips: 8,
            frames_per_clip: 9,
            width: 64,
            height: 64,
            neighbor_radius: 2,
            mask_threshold: 0.15,
            min_speed: 1.0,
            max_speed: 4.0,
            min_fraction: 0.05,
            max_fraction: 0.35,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowEntry {
    pub from: usize,
    pub to: usize,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub split: String,
    pub velocity: (f64, f64),
    pub texture_seed: u64,
    pub contaminants: ContaminantSpec,
    pub contaminated_fraction: f64,
    /// Relative paths, indexed by frame.
    pub frames_raw: Vec<String>,
    pub frames_png: Vec<String>,
    pub clean_raw: Vec<String>,
    pub clean_png: Vec<String>,
    pub masks_png: Vec<String>,
    pub flows: Vec<FlowEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames_per_clip: usize,
    pub neighbor_radius: usize,
    pub mask_threshold: f32,
    pub clips: Vec<ClipEntry>,
}

impl CorpusManifest {
    pub fn clips_of_split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a ClipEntry> {
        self.clips.iter().filter(move |c| c.split == split)
    }
}

/// One fully generated clip, in memory.
pub struct GeneratedClip {
    pub scene: SceneSpec,
    pub contaminants: ContaminantSpec,
    pub clean: Vec<TensorData<f32>>,
    pub contaminated: Vec<TensorData<f32>>,
    pub alphas: Vec<TensorData<f32>>,
    pub masks: Vec<TensorData<f32>>,
    pub fraction: f64,
}

fn draw_contaminants(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ContaminantSpec {
    let count = rng.gen_range(1..=3);
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let n_harm = rng.gen_range(2..=3);
        let harmonics = (0..n_harm)
            .map(|j| {
                (rng.gen_range(0.0..0.3 / (j as f64 + 1.0)), rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        let drift_angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let drift_mag = rng.gen_range(0.0..0.3);
        blobs.push(BlobSpec {
            center: (
                rng.gen_range(0.15 * w as f64..0.85 * w as f64),
                rng.gen_range(0.15 * h as f64..0.85 * h as f64),
            ),
            radius: rng.gen_range(0.09..0.16) * w.min(h) as f64,
            harmonics,
            sigma_b: rng.gen_range(1.0..2.2),
            attenuation: rng.gen_range(0.5..0.95),
            scatter: rng.gen_range(0.1..0.5),
            refraction: rng.gen_range(0.0..1.5),
            drift: (drift_mag * drift_angle.cos(), drift_mag * drift_angle.sin()),
        });
    }
    ContaminantSpec { blobs }
}

/// Generate one clip deterministically from its seed, rejecting contaminant
/// draws until the contaminated fraction lands inside the configured band.
pub fn generate_clip(params: &CorpusParams, clip_seed: u64) -> Result<GeneratedClip, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen_range(params.min_speed..params.max_speed);
    let scene = SceneSpec {
        width: params.width,
        height: params.height,
        frames: params.frames_per_clip,
        texture_seed: rng.gen(),
        velocity: (speed * angle.cos(), speed * angle.sin()),
    };
    let clean = gen_background_clip(&scene)?;

    for _attempt in 0..100 {
        let contaminants = draw_contaminants(&mut rng, params.width, params.height);
        let mut contaminated = Vec::with_capacity(clean.len());
        let mut alphas = Vec::with_capacity(clean.len());
        let mut masks = Vec::with_capacity(clean.len());
        let mut fraction_sum = 0.0f64;
        for (t, frame) in clean.iter().enumerate() {
            let (image, alpha) = apply_contaminants(frame, &contaminants, t);
            let mask = derive_gt_attention(&alpha, params.mask_threshold);
            fraction_sum += mask.data.iter().filter(|v| **v == 1.0).count() as f64
                / mask.data.len() as f64;
            contaminated.push(image);
            alphas.push(alpha);
            masks.push(mask);
        }
        let fraction = fraction_sum / clean.len() as f64;
        if fraction >= params.min_fraction && fraction <= params.max_fraction {
            return Ok(GeneratedClip { scene, contaminants, clean, contaminated, alphas, masks, fraction });
        }
    }
    Err(PipelineError::Invalid(format!(
        "could not draw contaminants inside the [{}, {}] fraction band after 100 attempts",
        params.min_fraction, params.max_fraction
    )))
}

/// Seed for clip index `i` under master seed `s`.
pub fn clip_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generate and write the whole corpus; returns the manifest (also written
/// to `out_dir/manifest.json`).
pub fn emit_corpus(params: &CorpusParams, out_dir: &Path) -> Result<CorpusManifest, PipelineError> {
    fs::create_dir_all(out_dir).map_err(|e| IoFormatError::io(out_dir, e))?;
    let total = params.train_clips + params.test_clips;
    let mut clips = Vec::with_capacity(total);
    for idx in 0..total {
        let clip = generate_clip(params, clip_seed(params.seed, idx))?;
        let id = format!("clip_{idx:04}");
        let split = if idx < params.train_clips { "train" } else { "test" };
        let clip_dir = out_dir.join(&id);
        fs::create_dir_all(&clip_dir).map_err(|e| IoFormatError::io(&clip_dir, e))?;

        let mut entry = ClipEntry {
            id: id.clone(),
            split: split.into(),
            velocity: clip.scene.velocity,
            texture_seed: clip.scene.texture_seed,
            contaminants: clip.contaminants.clone(),
            contaminated_fraction: clip.fraction,
            frames_raw: Vec::new(),
            frames_png: Vec::new(),
            clean_raw: Vec::new(),
            clean_png: Vec::new(),
            masks_png: Vec::new(),
            flows: Vec::new(),
        };
        for t in 0..params.frames_per_clip {
            let stem = format!("{id}/frame_{t:03}");
            let raw = format!("{stem}.rawf32");
            let image = format!("{stem}.png");
            rawf32::write_rawf32(&out_dir.join(&raw), &clip.contaminated[t])?;
            png::write_rgb_png(&out_dir.join(&image), &clip.contaminated[t])?;
            entry.frames_raw.push(raw);
            entry.frames_png.push(image);

            let stem = format!("{id}/clean_{t:03}");
            let raw = format!("{stem}.rawf32");
            let image = format!("{stem}.png");
            rawf32::write_rawf32(&out_dir.join(&raw), &clip.clean[t])?;
            png::write_rgb_png(&out_dir.join(&image), &clip.clean[t])?;
            entry.clean_raw.push(raw);
            entry.clean_png.push(image);

            let mask = format!("{id}/mask_{t:03}.png");
            png::write_gray_png(&out_dir.join(&mask), &clip.masks[t])?;
            entry.masks_png.push(mask);
        }
        for t in 0..params.frames_per_clip {
            for k in t.saturating_sub(params.neighbor_radius)
                ..=(t + params.neighbor_radius).min(params.frames_per_clip - 1)
            {
                if k == t {
                    continue;
                }
                let path = format!("{id}/flow_{t:03}_{k:03}.flo");
                flo::write_flo(&out_dir.join(&path), &gt_flow(&clip.scene, t, k))?;
                entry.flows.push(FlowEntry { from: t, to: k, path });
            }
        }
        clips.push(entry);
    }
    let manifest = CorpusManifest {
        seed: params.seed,
        width: params.width,
        height: params.height,
        frames_per_clip: params.frames_per_clip,
        neighbor_radius: params.neighbor_radius,
        mask_threshold: params.mask_threshold,
        clips,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| IoFormatError::Json { path: "manifest".into(), detail: e.to_string() })?;
    let path = out_dir.join("manifest.json");
    fs::write(&path, json).map_err(|e| IoFormatError::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest, PipelineError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| IoFormatError::io(&path, e))?;
    let manifest = serde_json::from_str(&text)
        .map_err(|e| IoFormatError::Json { path: path.display().to_string(), detail: e.to_string() })?;
    Ok(manifest)
}

/// A clip pulled back into memory for training/evaluation.
pub struct LoadedClip {
    pub id: String,
    pub contaminated: Vec<TensorData<f32>>,
    pub clean: Vec<TensorData<f32>>,
    pub masks: Vec<TensorData<f32>>,
    pub velocity: (f64, f64),
    /// Ground-truth flows keyed by (from, to).
    pub flows: HashMap<(usize, usize), TensorData<f32>>,
}

pub fn load_clip(dir: &Path, manifest: &CorpusManifest, entry: &ClipEntry) -> Result<LoadedClip, PipelineError> {
    let (h, w) = (manifest.height, manifest.width);
    let mut clip = LoadedClip {
        id: entry.id.clone(),
        contaminated: Vec::new(),
        clean: Vec::new(),
        masks: Vec::new(),
        velocity: entry.velocity,
        flows: HashMap::new(),
    };
    for raw in &entry.frames_raw {
        clip.contaminated.push(rawf32::read_rawf32(&dir.join(raw), 3, h, w)?);
    }
    for raw in &entry.clean_raw {
        clip.clean.push(rawf32::read_rawf32(&dir.join(raw), 3, h, w)?);
    }
    for m in &entry.masks_png {
        clip.masks.push(png::read_gray_png(&dir.join(m))?);
    }
    for f in &entry.flows {
        clip.flows.insert((f.from, f.to), flo::read_flo(&dir.join(&f.path))?);
    }
    Ok(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(seed: u64) -> CorpusParams {
        CorpusParams {
            seed,
            train_clips: 2,
            test_clips: 1,
            frames_per_clip: 5,
            width: 32,
            height: 32,
            ..CorpusParams::default()
        }
    }

    #[test]
    fn clip_generation_is_deterministic() {
        let params = tiny_params(11);
        let a = generate_clip(&params, clip_seed(params.seed, 0)).unwrap();
        let b = generate_clip(&params, clip_seed(params.seed, 0)).unwrap();
        assert_eq!(a.scene.velocity, b.scene.velocity);
        for (fa, fb) in a.contaminated.iter().zip(&b.contaminated) {
            assert_eq!(fa.data, fb.data);
        }
    }

    #[test]
    fn clip_fraction_lands_in_band() {
        let params = tiny_params(3);
        for idx in 0..3 {
            let clip = generate_clip(&params, clip_seed(params.seed, idx)).unwrap();
            assert!(clip.fraction >= params.min_fraction && clip.fraction <= params.max_fraction,
                "clip {idx} fraction {} outside band", clip.fraction);
        }
    }

    #[test]
    fn contaminated_differs_from_clean_only_under_alpha() {
        let params = tiny_params(5);
        let clip = generate_clip(&params, clip_seed(params.seed, 0)).unwrap();
        let t = 2;
        let (sh, alpha) = (clip.clean[t].shape, &clip.alphas[t]);
        for y in 0..sh.h {
            for x in 0..sh.w {
                if alpha.at(0, 0, y, x) == 0.0 {
                    // Refraction can pull color from alpha's support into a
                    // zero-alpha pixel only if grad(alpha) != 0 there, which
                    // requires a nonzero neighbor; strictly interior
                    // zero-alpha pixels must match the clean frame exactly.
                    let neighbors_zero = (y.saturating_sub(1)..=(y + 1).min(sh.h - 1))
                        .all(|yy| (x.saturating_sub(1)..=(x + 1).min(sh.w - 1))
                            .all(|xx| alpha.at(0, 0, yy, xx) == 0.0));
                    if neighbors_zero {
                        for c in 0..3 {
                            assert_eq!(clip.contaminated[t].at(0, c, y, x), clip.clean[t].at(0, c, y, x));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn emit_and_reload_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let params = tiny_params(23);
        let manifest = emit_corpus(&params, dir.path()).unwrap();
        assert_eq!(manifest.clips.len(), 3);
        assert_eq!(manifest.clips_of_split("train").count(), 2);
        assert_eq!(manifest.clips_of_split("test").count(), 1);

        let reloaded = load_manifest(dir.path()).unwrap();
        assert_eq!(reloaded.clips.len(), manifest.clips.len());
        assert_eq!(reloaded.seed, params.seed);

        let clip = load_clip(dir.path(), &reloaded, &reloaded.clips[0]).unwrap();
        assert_eq!(clip.contaminated.len(), params.frames_per_clip);
        assert_eq!(clip.clean.len(), params.frames_per_clip);
        assert_eq!(clip.masks.len(), params.frames_per_clip);
        // raw frames reload bit-exact
        let fresh = generate_clip(&params, clip_seed(params.seed, 0)).unwrap();
        assert_eq!(clip.contaminated[0].data, fresh.contaminated[0].data);
        assert_eq!(clip.clean[3].data, fresh.clean[3].data);
        // masks are binary and round-trip exactly through PNG
        assert_eq!(clip.masks[2].data, fresh.masks[2].data);
        // flows cover |t-k| <= N and read back as the constant GT field
        let n = params.neighbor_radius;
        for t in 0..params.frames_per_clip {
            for k in 0..params.frames_per_clip {
                if k != t && k.abs_diff(t) <= n {
                    let flow = clip.flows.get(&(t, k)).expect("missing flow pair");
                    let expect = gt_flow(&fresh.scene, t, k);
                    assert_eq!(flow.data, expect.data);
                } else {
                    assert!(!clip.flows.contains_key(&(t, k)));
                }
            }
        }
    }

    #[test]
    fn rerun_writes_identical_bytes() {
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        let params = tiny_params(41);
        emit_corpus(&params, da.path()).unwrap();
        emit_corpus(&params, db.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(da.path().join("clip_0001"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert!(names.len() > 10);
        for name in names {
            let a = std::fs::read(da.path().join("clip_0001").join(&name)).unwrap();
            let b = std::fs::read(db.path().join("clip_0001").join(&name)).unwrap();
            assert_eq!(a, b, "file {name:?} differs between identical-seed runs");
        }
    }

    #[test]
    fn different_seeds_give_different_clips() {
        let params = tiny_params(1);
        let a = generate_clip(&params, clip_seed(1, 0)).unwrap();
        let b = generate_clip(&params, clip_seed(2, 0)).unwrap();
        assert_ne!(a.scene.velocity, b.scene.velocity);
        assert_ne!(a.contaminated[0].data, b.contaminated[0].data);
    }
}

//! Frame-directory IO and checkpoint loading shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use lensclear_core::checkpoint::{load_checkpoint, read_manifest, CheckpointManifest};
use lensclear_core::io::{read_rgb_png, write_rgb_png};
use lensclear_core::pipeline::{Models, SequenceModels};
use lensclear_core::tensor::TensorData;

/// Checkpoint `stage` tag written by `train-single`.
pub const STAGE_SINGLE: &str = "single";
/// Checkpoint `stage` tag written by `train-multi`.
pub const STAGE_MULTI: &str = "multi";

/// Read the `.png` frames in `dir` (sorted by file name) as RGB and check
/// they agree on resolution. When `prefix` is given, only file names
/// starting with it count — corpus clip directories keep clean frames and
/// masks next to the inputs.
pub fn read_frame_dir(dir: &Path, prefix: Option<&str>) -> Result<Vec<TensorData<f32>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading input directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter(|p| {
            prefix.is_none_or(|pre| {
                p.file_name().is_some_and(|n| n.to_string_lossy().starts_with(pre))
            })
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no matching .png frames in {}", dir.display());
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = read_rgb_png(p)?;
        if let Some(first) = frames.first() {
            let first: &TensorData<f32> = first;
            if f.shape != first.shape {
                bail!(
                    "frame {} is {}, expected {} like the first frame",
                    p.display(),
                    f.shape,
                    first.shape
                );
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

/// Write frames as `prefix_NNNN.png` under `dir`, returning the paths.
pub fn write_frame_dir(
    dir: &Path,
    prefix: &str,
    frames: &[TensorData<f32>],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut out = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let p = dir.join(format!("{prefix}_{i:04}.png"));
        write_rgb_png(&p, f)?;
        out.push(p);
    }
    Ok(out)
}

/// Load a single-frame-stage checkpoint into a fresh model set.
pub fn load_single(path: &Path) -> Result<(Models<f32>, CheckpointManifest)> {
    let manifest = read_manifest(path)?;
    if manifest.stage != STAGE_SINGLE {
        bail!(
            "{} holds a `{}` checkpoint, expected `{STAGE_SINGLE}`",
            path.display(),
            manifest.stage
        );
    }
    let mut models = Models::<f32>::new(manifest.config.seed);
    load_checkpoint(path, &mut models.store)?;
    Ok((models, manifest))
}

/// Load a multi-frame-stage checkpoint into a fresh model set.
pub fn load_sequence(path: &Path) -> Result<(SequenceModels<f32>, CheckpointManifest)> {
    let manifest = read_manifest(path)?;
    if manifest.stage != STAGE_MULTI {
        bail!(
            "{} holds a `{}` checkpoint, expected `{STAGE_MULTI}`",
            path.display(),
            manifest.stage
        );
    }
    let mut models = SequenceModels::<f32>::new(manifest.config.seed);
    load_checkpoint(path, &mut models.store)?;
    Ok((models, manifest))
}

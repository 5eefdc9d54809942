//! Model checkpoints: a magic header, a JSON manifest (architecture hash,
//! config snapshot, epoch, seed, parameter table), then every parameter as
//! flat little-endian f32 in manifest order. Loading restores weights
//! bit-exactly, so a reloaded model's forward pass equals the in-memory one.

use crate::config::TrainConfig;
use crate::error::{IoFormatError, PipelineError};
use crate::tensor::ParamStore;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LNSCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    /// NCHW dimensions.
    pub shape: [usize; 4],
}

/// Everything about a checkpoint except the weights themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Hash of the (name, shape) table; a load into a mismatched
    /// architecture fails before any weight is touched.
    pub arch_hash: String,
    /// Which trainer produced it: "single" or "multi".
    pub stage: String,
    pub epoch: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub params: Vec<ParamRecord>,
}

/// FNV-1a over the sorted (name, shape) table. Insensitive to parameter
/// registration order, sensitive to any rename or reshape.
pub fn arch_hash(store: &ParamStore<f32>) -> String {
    let mut table: Vec<String> = store
        .export()
        .into_iter()
        .map(|(name, sh, _)| format!("{name}:{}x{}x{}x{}", sh.n, sh.c, sh.h, sh.w))
        .collect();
    table.sort();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for entry in &table {
        for b in entry.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Write `store`'s parameters to `path`. The returned manifest is what was
/// embedded in the file.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore<f32>,
    stage: &str,
    epoch: usize,
    config: &TrainConfig,
) -> Result<CheckpointManifest, PipelineError> {
    let exported = store.export();
    let manifest = CheckpointManifest {
        arch_hash: arch_hash(store),
        stage: stage.into(),
        epoch,
        seed: config.seed,
        config: config.clone(),
        params: exported
            .iter()
            .map(|(name, sh, _)| ParamRecord { name: name.clone(), shape: [sh.n, sh.c, sh.h, sh.w] })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| IoFormatError::Json { path: path.display().to_string(), detail: e.to_string() })?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| IoFormatError::io(dir, e))?;
        }
    }
    let mut file = fs::File::create(path).map_err(|e| IoFormatError::io(path, e))?;
    let io = |e| IoFormatError::io(path, e);
    file.write_all(MAGIC).map_err(io)?;
    file.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    file.write_all(&json).map_err(io)?;
    for (_, _, data) in &exported {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes).map_err(io)?;
    }
    Ok(manifest)
}

/// Read only the manifest (cheap; weights are not touched).
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest, PipelineError> {
    let mut file = fs::File::open(path).map_err(|e| IoFormatError::io(path, e))?;
    read_manifest_from(&mut file, path)
}

fn read_manifest_from(file: &mut fs::File, path: &Path) -> Result<CheckpointManifest, PipelineError> {
    let io = |e| IoFormatError::io(path, e);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(IoFormatError::malformed(path, "not a checkpoint file (bad magic)").into());
    }
    let mut len = [0u8; 4];
    file.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    file.read_exact(&mut json).map_err(io)?;
    serde_json::from_slice(&json)
        .map_err(|e| IoFormatError::Json { path: path.display().to_string(), detail: e.to_string() }.into())
}

/// Load a checkpoint into `store`, which must already hold the same
/// architecture (same parameter names and shapes).
pub fn load_checkpoint(path: &Path, store: &mut ParamStore<f32>) -> Result<CheckpointManifest, PipelineError> {
    let mut file = fs::File::open(path).map_err(|e| IoFormatError::io(path, e))?;
    let manifest = read_manifest_from(&mut file, path)?;

    let expected = arch_hash(store);
    if manifest.arch_hash != expected {
        return Err(IoFormatError::malformed(
            path,
            format!(
                "architecture mismatch: checkpoint {} vs model {expected}",
                manifest.arch_hash
            ),
        )
        .into());
    }
    for record in &manifest.params {
        let id = store.find(&record.name).ok_or_else(|| {
            IoFormatError::malformed(path, format!("checkpoint names unknown parameter `{}`", record.name))
        })?;
        let numel: usize = record.shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        file.read_exact(&mut bytes).map_err(|e| IoFormatError::io(path, e))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.load_value(id, &data).map_err(PipelineError::Tensor)?;
    }
    // Trailing bytes mean the manifest lies about the payload.
    let mut rest = [0u8; 1];
    match file.read(&mut rest) {
        Ok(0) => {}
        Ok(_) => return Err(IoFormatError::malformed(path, "trailing bytes after parameter data").into()),
        Err(e) => return Err(IoFormatError::io(path, e).into()),
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Models;
    use crate::tensor::{GraphBinds, Shape, Tape, TensorData};

    // Encode + one GRU step: those convolutions are randomly initialized
    // (unlike the zero-initialized prediction heads), so differently seeded
    // models provably disagree before a load and agree after.
    fn forward_probe(models: &Models<f32>) -> Vec<f32> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let shape = Shape::new(1, 3, 16, 16);
        let frame = TensorData::<f32> {
            shape,
            data: (0..shape.numel()).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect(),
        };
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&models.store);
        let mut g = crate::nets::Graph::new(&mut tape, &models.store, &mut binds);
        let x = g.input(frame.clone());
        let att = g.input(TensorData::full(Shape::new(1, 1, 16, 16), 0.3f32));
        let warped = g.input(frame);
        let eff = g.input(TensorData::full(Shape::new(1, 1, 16, 16), 0.2f32));
        let enc = models.restoration.encode_inputs(&mut g, x, att, warped, eff);
        let h0 = g.input(crate::nets::RestorationNets::zero_hidden(16, 16));
        let h1 = models.restoration.gru_step(&mut g, h0, enc);
        tape.value(h1).data.clone()
    }

    #[test]
    fn round_trip_restores_forward_outputs_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage1.ckpt");
        let cfg = TrainConfig::desk();

        let trained = Models::<f32>::new(3);
        let before = forward_probe(&trained);
        let manifest = save_checkpoint(&path, &trained.store, "single", 12, &cfg).unwrap();
        assert_eq!(manifest.epoch, 12);
        assert_eq!(manifest.stage, "single");
        assert_eq!(manifest.params.len(), trained.store.export().len());

        // A differently seeded model disagrees until the load, then matches
        // bit for bit.
        let mut other = Models::<f32>::new(99);
        assert_ne!(forward_probe(&other), before);
        let loaded = load_checkpoint(&path, &mut other.store).unwrap();
        assert_eq!(loaded.arch_hash, manifest.arch_hash);
        assert_eq!(loaded.config, cfg);
        assert_eq!(forward_probe(&other), before);
    }

    #[test]
    fn manifest_reads_without_touching_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.ckpt");
        let cfg = TrainConfig::desk();
        let models = Models::<f32>::new(1);
        save_checkpoint(&path, &models.store, "single", 7, &cfg).unwrap();
        let manifest = read_manifest(&path).unwrap();
        assert_eq!(manifest.epoch, 7);
        assert_eq!(manifest.seed, cfg.seed);
        assert!(manifest.params.iter().any(|p| p.name.starts_with("att.")));
    }

    #[test]
    fn wrong_magic_truncation_and_arch_mismatch_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig::desk();
        let models = Models::<f32>::new(1);

        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"PNG\x0d\x0a\x1a\x0afake").unwrap();
        let mut store = Models::<f32>::new(1).store;
        assert!(load_checkpoint(&bad, &mut store).is_err());

        let path = dir.path().join("ok.ckpt");
        save_checkpoint(&path, &models.store, "single", 1, &cfg).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&cut, &mut store).is_err());

        // Sequence-stage stores lack the detector: different architecture.
        let mut seq = crate::pipeline::SequenceModels::<f32>::new(1).store;
        let err = load_checkpoint(&path, &mut seq).unwrap_err();
        assert!(err.to_string().contains("architecture mismatch"), "{err}");
    }

    #[test]
    fn identical_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig::desk();
        let models = Models::<f32>::new(21);
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&a, &models.store, "single", 3, &cfg).unwrap();
        save_checkpoint(&b, &models.store, "single", 3, &cfg).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

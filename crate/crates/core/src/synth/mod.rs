//! Synthetic data: procedurally textured moving backgrounds overlaid with
//! semi-transparent drifting contaminant blobs, plus ground-truth masks and
//! flows, written out as a reloadable corpus.

pub mod contaminant;
pub mod corpus;
pub mod scene;
pub mod texture;

pub use contaminant::{apply_contaminants, derive_gt_attention, BlobSpec, ContaminantSpec};
pub use corpus::{
    clip_seed, emit_corpus, generate_clip, load_clip, load_manifest, ClipEntry, CorpusManifest,
    CorpusParams, GeneratedClip, LoadedClip,
};
pub use scene::{gen_background_clip, gt_flow, SceneSpec};
pub use texture::Texture;

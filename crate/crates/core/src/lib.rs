//! Two-stage recurrent video restoration for lens-contaminant artifacts.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: NCHW tensors, a reverse-mode autodiff tape, Adam, and
//!   finite-difference gradient verification.
//! - [`io`]: image / flow / raw-frame file formats and JSON manifests.
//! - [`synth`]: procedural video clips with ground-truth contaminant masks,
//!   flows, and clean plates.
//! - [`flow`]: classical coarse-to-fine block-matching optical flow plus
//!   occlusion reasoning.
//! - [`nets`]: the trainable networks (contaminant detector, flow
//!   completion, recurrent restoration, frozen feature pyramid).
//! - [`losses`]: training objectives for both stages.
//! - [`pipeline`]: single-frame and multi-frame restoration passes built
//!   from the pieces above.
//! - [`metrics`]: PSNR / SSIM / warp-consistency evaluation on plain
//!   buffers.
//! - [`train`]: datasets, the two-phase training loop, and evaluation
//!   drivers.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flow;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{ConfigError, IoFormatError, PipelineError, TensorError};

//! `lensclear`: drives the two-stage lens-contaminant video restoration
//! pipeline — synthetic corpus generation, both training stages,
//! intermediate-output generation, inference, evaluation, and a gradient
//! self-check.

mod commands;
mod frames;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "lensclear", version, about = "Video restoration for lens-contaminant artifacts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus with ground-truth flow and masks.
    Synth {
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
        /// Master seed; every clip derives its own stream from it.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of training clips.
        #[arg(long)]
        train_clips: Option<usize>,
        /// Number of held-out test clips.
        #[arg(long)]
        test_clips: Option<usize>,
        /// Frames per clip.
        #[arg(long)]
        frames: Option<usize>,
        /// Frame width in pixels.
        #[arg(long)]
        width: Option<usize>,
        /// Frame height in pixels.
        #[arg(long)]
        height: Option<usize>,
        /// Largest |t−k| to store ground-truth flow for.
        #[arg(long)]
        radius: Option<usize>,
    },
    /// Train the single-frame restoration stage from scratch.
    TrainSingle {
        /// Corpus directory produced by `synth`.
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for checkpoints and the loss curve.
        #[arg(long)]
        out: PathBuf,
        /// Training config file (`key = value` text); defaults to the
        /// desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore a corpus split with a trained single-frame model, writing
    /// the intermediate frames the multi-frame stage trains on.
    GenIntermediate {
        #[arg(long)]
        corpus: PathBuf,
        /// Single-frame stage checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which split to restore.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Fine-tune the multi-frame refinement stage on intermediate outputs.
    TrainMulti {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory written by `gen-intermediate`.
        #[arg(long)]
        intermediate: PathBuf,
        /// Single-frame stage checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore a directory of PNG frames. Runs the single-frame stage,
    /// then the multi-frame stage when its checkpoint is given.
    Infer {
        /// Directory of input frames (`*.png`, sorted by name).
        #[arg(long)]
        input: PathBuf,
        /// Only read input frames whose file name starts with this, e.g.
        /// `frame_` inside a corpus clip directory.
        #[arg(long)]
        prefix: Option<String>,
        /// Single-frame stage checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Multi-frame stage checkpoint; omit for a single-stage run.
        #[arg(long)]
        multi: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Matching clean frames; when given, metrics are written too.
        #[arg(long)]
        clean: Option<PathBuf>,
        /// File-name filter for the clean directory, like `--prefix`.
        #[arg(long)]
        clean_prefix: Option<String>,
        /// Dump per-iteration attention/mask/blend/restored panels.
        #[arg(long)]
        debug_panels: bool,
    },
    /// Score a trained pipeline against a corpus split's clean frames.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        /// Single-frame stage checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Multi-frame stage checkpoint; omit to stop after stage one.
        #[arg(long)]
        multi: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also score the three single-frame ablations.
        #[arg(long)]
        ablations: bool,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { out, seed, train_clips, test_clips, frames, width, height, radius } => {
            commands::synth(&out, seed, train_clips, test_clips, frames, width, height, radius)
        }
        Command::TrainSingle { corpus, out, config, seed } => {
            commands::train_single(&corpus, &out, config.as_deref(), seed)
        }
        Command::GenIntermediate { corpus, checkpoint, out, split } => {
            commands::gen_intermediate(&corpus, &checkpoint, &out, &split)
        }
        Command::TrainMulti { corpus, intermediate, checkpoint, out, config, seed } => {
            commands::train_multi(&corpus, &intermediate, &checkpoint, &out, config.as_deref(), seed)
        }
        Command::Infer { input, prefix, checkpoint, multi, out, clean, clean_prefix, debug_panels } => {
            commands::infer(
                &input,
                prefix.as_deref(),
                &checkpoint,
                multi.as_deref(),
                &out,
                clean.as_deref(),
                clean_prefix.as_deref(),
                debug_panels,
            )
        }
        Command::Eval { corpus, checkpoint, multi, out, split, ablations } => {
            commands::eval(&corpus, &checkpoint, multi.as_deref(), &out, &split, ablations)
        }
        Command::Gradcheck { seed } => commands::gradcheck(seed),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    if let Err(e) = run(Cli::parse()) {
        log::error!("{e:#}");
        std::process::exit(1);
    }
}

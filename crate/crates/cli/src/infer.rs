use std::path::PathBuf;

use anyhow::{Context, Result};
use bonnet_core::io_ct::{export_mask, load_hu_volume};
use bonnet_core::network::load_checkpoint;
use bonnet_core::pipeline::{predict_volume, ForwardMode, PredictConfig};

use crate::manifest::{sibling, RunManifest};

/// Window edge when the checkpoint does not record its training window.
pub const DEFAULT_WINDOW: usize = 128;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    ckpt: PathBuf,
    /// CT volume: RAWZ (HU int16) or NIfTI-1 (`.nii`, `.nii.gz`).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output label mask (RAWZ, uint16).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for window inference.
    #[arg(long, env = "BONNET_NUM_WORKERS", value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    /// Window edge; defaults to the training window stored in the checkpoint.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    window: Option<u64>,
    #[arg(long, value_enum, default_value_t = Mode::Sparse)]
    mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Sparse,
    Dense,
}

impl From<Mode> for ForwardMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Sparse => ForwardMode::Sparse,
            Mode::Dense => ForwardMode::Dense,
        }
    }
}

pub fn run(args: Args) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt).with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    let (volume, meta) = load_hu_volume(&args.input).with_context(|| format!("loading {}", args.input.display()))?;
    let cfg = PredictConfig {
        window: args.window.map(|w| w as usize).or(ckpt.window).unwrap_or(DEFAULT_WINDOW),
        workers: args.workers.map(|w| w as usize),
        mode: args.mode.into(),
        ..PredictConfig::default()
    };
    let prediction = predict_volume(&ckpt, &volume, &cfg).context("inference failed")?;
    export_mask(&args.out, &prediction.labels, meta.spacing)
        .with_context(|| format!("writing mask {}", args.out.display()))?;

    let mut manifest = RunManifest::new("infer", &cfg)?;
    manifest.seed = Some(ckpt.seed);
    manifest.inputs = vec![args.ckpt.clone(), args.input.clone()];
    manifest.outputs = vec![args.out.clone()];
    manifest.timings = prediction.timings;
    manifest.write(&sibling(&args.out, ".run.json"))?;

    let t = prediction.timings;
    println!(
        "{} active voxels, {} windows; preprocess {:.3} s, forward {:.3} s, fuse {:.3} s; mask {}",
        prediction.active_voxels,
        prediction.windows,
        t.preprocess,
        t.forward,
        t.fuse,
        args.out.display()
    );
    Ok(())
}

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use bonnet_core::io_ct::{load_hu_volume, write_cache};
use bonnet_core::network::load_checkpoint;
use bonnet_core::pipeline::{hu_threshold_to_sparse, zscore, FusionConfig};

use crate::manifest::{sibling, RunManifest};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// CT volume: RAWZ (HU int16) or NIfTI-1.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output sparse cache (BNC1).
    #[arg(long)]
    out: PathBuf,
    /// Z-score the retained voxels with this checkpoint's dataset statistics.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 200.0)]
    hu_lo: f64,
    #[arg(long, default_value_t = 3000.0)]
    hu_hi: f64,
}

pub fn run(args: Args) -> Result<()> {
    let cfg = FusionConfig { hu_lo: args.hu_lo, hu_hi: args.hu_hi, ..FusionConfig::default() };
    cfg.validate().context("invalid HU range")?;
    let stats = match &args.ckpt {
        Some(path) => Some(
            load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?
                .stats,
        ),
        None => None,
    };

    let started = Instant::now();
    let (volume, _) = load_hu_volume(&args.input).with_context(|| format!("loading {}", args.input.display()))?;
    let mut st = hu_threshold_to_sparse::<f32>(&volume, &cfg);
    if let Some(stats) = &stats {
        st = zscore(&st, stats);
    }
    let secs = started.elapsed().as_secs_f64();
    write_cache(&args.out, &st).with_context(|| format!("writing cache {}", args.out.display()))?;

    let mut manifest = RunManifest::new("preprocess", &cfg)?;
    manifest.inputs.push(args.input.clone());
    manifest.inputs.extend(args.ckpt.clone());
    manifest.outputs.push(args.out.clone());
    manifest.timings.preprocess = secs;
    manifest.write(&sibling(&args.out, ".run.json"))?;

    let occupancy = st.len() as f64 / volume.len() as f64;
    println!("{} of {} voxels retained ({:.2}%); cache {}", st.len(), volume.len(), 100.0 * occupancy, args.out.display());
    Ok(())
}

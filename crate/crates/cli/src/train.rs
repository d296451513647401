use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use bonnet_core::network::save_checkpoint;
use bonnet_core::pipeline::{train, TrainConfig};

use crate::dataset::read_dataset;
use crate::manifest::{sibling, RunManifest};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset directory written by `bonnet phantom`.
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path. The loss curve goes to `<out>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading train config {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text)
                .with_context(|| format!("parsing train config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.validate().context("invalid train config")?;

    let started = Instant::now();
    let (_, cases) = read_dataset(&args.data)?;
    let load_secs = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let outcome = train(&cases, &cfg, args.steps, args.seed, |_, _| {}).context("training failed")?;
    let train_secs = started.elapsed().as_secs_f64();

    save_checkpoint(&args.out, &outcome.checkpoint)
        .with_context(|| format!("writing checkpoint {}", args.out.display()))?;
    let csv_path = sibling(&args.out, ".loss.csv");
    let mut csv = String::new();
    for (step, loss) in outcome.losses.iter().enumerate() {
        writeln!(csv, "{},{loss}", step + 1)?;
    }
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;

    let mut manifest = RunManifest::new("train", &cfg)?;
    manifest.seed = Some(args.seed);
    manifest.inputs.push(args.data.clone());
    manifest.inputs.extend(args.config.clone());
    manifest.outputs = vec![args.out.clone(), csv_path];
    manifest.timings.preprocess = load_secs;
    manifest.timings.forward = train_secs;
    manifest.write(&sibling(&args.out, ".run.json"))?;

    let last = outcome.losses.last().map_or("n/a".to_string(), |l| format!("{l:.5}"));
    println!(
        "trained {} steps on {} cases in {train_secs:.1} s (final loss {last}); checkpoint {}",
        args.steps,
        cases.len(),
        args.out.display()
    );
    Ok(())
}

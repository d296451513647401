use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use bonnet_core::io_ct::{export_mask, write_hu_rawz};
use bonnet_core::pipeline::{generate_phantom, PhantomSpec};

use crate::dataset::{CaseEntry, DatasetManifest, DATASET_FILE};
use crate::manifest::RunManifest;

const SPACING: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Phantom spec JSON; the default torso phantom (64³) when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of phantoms; case `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading phantom spec {}", path.display()))?;
            serde_json::from_str::<PhantomSpec>(&text)
                .with_context(|| format!("parsing phantom spec {}", path.display()))?
        }
        None => PhantomSpec::default(),
    };
    spec.validate().context("invalid phantom spec")?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut cases = Vec::new();
    let mut outputs = Vec::new();
    for i in 0..args.count {
        let seed = args.seed.wrapping_add(i);
        let case = generate_phantom(&spec, seed).with_context(|| format!("generating phantom {i} (seed {seed})"))?;
        let name = format!("case_{i:03}");
        let volume = PathBuf::from(format!("{name}.rawz"));
        let labels = PathBuf::from(format!("{name}_labels.rawz"));
        write_hu_rawz(args.out.join(&volume), &case.hu, SPACING)?;
        export_mask(args.out.join(&labels), &case.labels, SPACING)?;
        outputs.push(args.out.join(&volume));
        outputs.push(args.out.join(&labels));
        cases.push(CaseEntry { name, volume, labels, seed, occupancy: case.occupancy() });
    }

    let dataset = DatasetManifest { spec: spec.clone(), seed: args.seed, cases };
    let dataset_path = args.out.join(DATASET_FILE);
    let mut text = serde_json::to_string_pretty(&dataset)?;
    text.push('\n');
    fs::write(&dataset_path, text).with_context(|| format!("writing {}", dataset_path.display()))?;
    outputs.push(dataset_path);

    let mut manifest = RunManifest::new("phantom", &spec)?;
    manifest.seed = Some(args.seed);
    manifest.inputs.extend(args.spec.clone());
    manifest.outputs = outputs;
    manifest.write(&args.out.join("run.json"))?;

    let mean_occ = dataset.cases.iter().map(|c| c.occupancy).sum::<f64>() / dataset.cases.len() as f64;
    println!(
        "wrote {} phantoms {:?} to {} (mean bone occupancy {:.2}%)",
        args.count,
        spec.shape,
        args.out.display(),
        100.0 * mean_occ
    );
    Ok(())
}

use std::path::PathBuf;

use anyhow::{Context, Result};
use bonnet_core::io_ct::load_hu_volume;
use bonnet_core::network::{load_checkpoint, Checkpoint};
use bonnet_core::pipeline::{predict_with_network, ForwardMode, PredictConfig, Prediction, StageTimings};
use bonnet_core::{Real, Volume};
use serde::Serialize;

use crate::infer::DEFAULT_WINDOW;
use crate::manifest::{sibling, RunManifest};

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = BenchMode::Both)]
    mode: BenchMode,
    /// Runs per mode; the report gives the median of each stage.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    repeat: u64,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[arg(long, env = "BONNET_NUM_WORKERS", value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    window: Option<u64>,
    /// Report path; defaults to `<ckpt>.bench.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum BenchMode {
    Sparse,
    Dense,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Default, Serialize)]
struct Samples {
    preprocess: Vec<f64>,
    forward: Vec<f64>,
    fuse: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct ModeReport {
    mode: ForwardMode,
    samples: Samples,
    median: StageTimings,
}

#[derive(Debug, Serialize)]
struct Agreement {
    /// Fraction of active voxels with the same fused label.
    label_agreement: f64,
    /// `max |s − d| / max |d|` over all fused class scores.
    max_rel_err: f64,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    precision: Precision,
    active_voxels: usize,
    windows: usize,
    modes: Vec<ModeReport>,
    /// Dense over sparse median forward seconds.
    #[serde(skip_serializing_if = "Option::is_none")]
    speedup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    agreement: Option<Agreement>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_mode<T: Real>(
    ckpt: &Checkpoint,
    volume: &Volume<f32>,
    cfg: &PredictConfig,
    repeat: u64,
) -> Result<(ModeReport, Prediction)> {
    let net = ckpt.network::<T>()?;
    let mut samples = Samples::default();
    let mut last = None;
    for _ in 0..repeat {
        let p = predict_with_network(&net, &ckpt.stats, volume, cfg).context("inference failed")?;
        samples.preprocess.push(p.timings.preprocess);
        samples.forward.push(p.timings.forward);
        samples.fuse.push(p.timings.fuse);
        last = Some(p);
    }
    let median = StageTimings {
        preprocess: median(&samples.preprocess),
        forward: median(&samples.forward),
        fuse: median(&samples.fuse),
    };
    let prediction = last.expect("repeat is at least 1");
    Ok((ModeReport { mode: cfg.mode, samples, median }, prediction))
}

fn agreement(sparse: &Prediction, dense: &Prediction) -> Agreement {
    let n = sparse.sparse_labels.len();
    let same = sparse.sparse_labels.iter().zip(&dense.sparse_labels).filter(|(a, b)| a == b).count();
    let scale = dense.scores.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = sparse.scores.iter().zip(&dense.scores).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Agreement {
        label_agreement: if n == 0 { 1.0 } else { same as f64 / n as f64 },
        max_rel_err: if scale > 0.0 { diff / scale } else { diff },
    }
}

pub fn run(args: Args) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt).with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
    let (volume, _) = load_hu_volume(&args.input).with_context(|| format!("loading {}", args.input.display()))?;
    let base = PredictConfig {
        window: args.window.map(|w| w as usize).or(ckpt.window).unwrap_or(DEFAULT_WINDOW),
        workers: args.workers.map(|w| w as usize),
        ..PredictConfig::default()
    };
    let modes: &[ForwardMode] = match args.mode {
        BenchMode::Sparse => &[ForwardMode::Sparse],
        BenchMode::Dense => &[ForwardMode::Dense],
        BenchMode::Both => &[ForwardMode::Sparse, ForwardMode::Dense],
    };

    let mut reports = Vec::new();
    let mut predictions = Vec::new();
    for &mode in modes {
        let cfg = PredictConfig { mode, ..base.clone() };
        let (report, prediction) = match args.precision {
            Precision::F32 => run_mode::<f32>(&ckpt, &volume, &cfg, args.repeat)?,
            Precision::F64 => run_mode::<f64>(&ckpt, &volume, &cfg, args.repeat)?,
        };
        reports.push(report);
        predictions.push(prediction);
    }

    let (speedup, agree) = match (reports.as_slice(), predictions.as_slice()) {
        ([s, d], [ps, pd]) => (Some(d.median.forward / s.median.forward.max(f64::MIN_POSITIVE)), Some(agreement(ps, pd))),
        _ => (None, None),
    };
    let report = BenchReport {
        precision: args.precision,
        active_voxels: predictions[0].active_voxels,
        windows: predictions[0].windows,
        modes: reports,
        speedup,
        agreement: agree,
    };

    for m in &report.modes {
        let t = m.median;
        println!(
            "{:?}: median preprocess {:.4} s, forward {:.4} s, fuse {:.4} s over {} runs",
            m.mode, t.preprocess, t.forward, t.fuse, args.repeat
        );
    }
    if let (Some(s), Some(a)) = (report.speedup, &report.agreement) {
        println!(
            "sparse speedup {s:.2}x; label agreement {:.4}%, max rel err {:.3e}",
            100.0 * a.label_agreement,
            a.max_rel_err
        );
    }

    let path = args.report.clone().unwrap_or_else(|| sibling(&args.ckpt, ".bench.json"));
    let mut manifest = RunManifest::new("bench", &base)?;
    manifest.seed = Some(ckpt.seed);
    manifest.inputs = vec![args.ckpt.clone(), args.input.clone()];
    manifest.outputs = vec![path.clone()];
    manifest.timings = report.modes[0].median;
    manifest.report = Some(serde_json::to_value(&report)?);
    manifest.write(&path)?;
    Ok(())
}

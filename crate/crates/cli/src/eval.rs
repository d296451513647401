use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use bonnet_core::io_ct::read_labels;
use bonnet_core::objective::{hard_dice, ClassGrouping};

use crate::manifest::{sibling, RunManifest};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Predicted label mask (RAWZ, uint16).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label mask (RAWZ, uint16).
    #[arg(long)]
    gt: PathBuf,
    /// JSON object mapping group names to class id lists.
    #[arg(long)]
    groups: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let text = fs::read_to_string(&args.groups).with_context(|| format!("reading groups {}", args.groups.display()))?;
    let mut grouping =
        ClassGrouping::from_json(&text).with_context(|| format!("parsing groups {}", args.groups.display()))?;
    let (pred, _) = read_labels(&args.pred).with_context(|| format!("loading {}", args.pred.display()))?;
    let (gt, _) = read_labels(&args.gt).with_context(|| format!("loading {}", args.gt.display()))?;

    // "overall" covers every foreground id seen in the groups or either mask.
    let mut foreground: BTreeSet<u16> = grouping.groups.values().flatten().copied().collect();
    foreground.extend(pred.data.iter().chain(&gt.data).copied());
    grouping.ensure_overall(foreground);
    let dice = hard_dice(&pred, &gt, &grouping).context("evaluation failed")?;

    let width = dice.iter().map(|d| d.group.len()).max().unwrap_or(0).max(5);
    println!("{:<width$}  {:>7}", "group", "dice");
    for d in &dice {
        println!("{:<width$}  {:>7.2}", d.group, d.dice);
    }
    let report = serde_json::to_value(&dice)?;
    println!("{}", serde_json::to_string(&report)?);

    let mut manifest = RunManifest::new("eval", &grouping)?;
    manifest.inputs = vec![args.pred.clone(), args.gt.clone(), args.groups.clone()];
    manifest.report = Some(report);
    manifest.write(&sibling(&args.pred, ".eval.json"))?;
    Ok(())
}

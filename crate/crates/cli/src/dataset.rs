use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bonnet_core::io_ct::{load_hu_volume, read_labels};
use bonnet_core::pipeline::{LabeledVolume, PhantomSpec};
use serde::{Deserialize, Serialize};

pub const DATASET_FILE: &str = "dataset.json";

/// Index of a phantom dataset directory. Paths are relative to the directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub cases: Vec<CaseEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseEntry {
    pub name: String,
    pub volume: PathBuf,
    pub labels: PathBuf,
    pub seed: u64,
    pub occupancy: f64,
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LabeledVolume>)> {
    let path = dir.join(DATASET_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading dataset manifest {}", path.display()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing dataset manifest {}", path.display()))?;
    if manifest.cases.is_empty() {
        bail!("dataset manifest {} lists no cases", path.display());
    }
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for case in &manifest.cases {
        let volume_path = dir.join(&case.volume);
        let (hu, _) = load_hu_volume(&volume_path).with_context(|| format!("loading {}", volume_path.display()))?;
        let labels_path = dir.join(&case.labels);
        let (labels, _) = read_labels(&labels_path).with_context(|| format!("loading {}", labels_path.display()))?;
        if labels.shape != hu.shape {
            bail!("case {}: labels {:?} do not match volume {:?}", case.name, labels.shape, hu.shape);
        }
        cases.push(LabeledVolume { hu, labels });
    }
    Ok((manifest, cases))
}

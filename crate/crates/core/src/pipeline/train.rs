use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::phantom::LabeledVolume;
use super::preprocess::{compute_dataset_stats, threshold_with_labels, zscore};
use super::sampling::{sample_training_window, SamplingConfig};
use super::FusionConfig;
use crate::error::{Error, Result};
use crate::network::{init_network, train_step, AdamConfig, Checkpoint, OptimState, UNetConfig};
use crate::objective::LossConfig;

/// Attempts at drawing a non-empty window before giving up on a step.
const MAX_WINDOW_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub network: UNetConfig,
    /// The class count is always taken from `network`.
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub sampling: SamplingConfig,
    /// Only the HU range is used during training.
    pub fusion: FusionConfig,
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig { classes: self.network.classes, ..self.loss.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss_config().validate()?;
        self.sampling.validate()?;
        self.fusion.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of every step, before that step's update.
    pub losses: Vec<f64>,
}

/// Trains a fresh network for `steps` windows drawn from `cases`.
///
/// The network is initialized from `seed`; case choice and window sampling
/// use a second ChaCha8 stream of the same seed. Windows without retained
/// voxels are redrawn. `on_step` sees each step index and loss.
pub fn train(
    cases: &[LabeledVolume],
    cfg: &TrainConfig,
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one case".into()));
    }
    let stats = compute_dataset_stats(cases.iter().map(|c| &c.hu), &cfg.fusion)?;
    let prepared = cases
        .iter()
        .map(|c| {
            let st = zscore(&threshold_with_labels::<f32>(&c.hu, &c.labels, &cfg.fusion)?, &stats);
            st.validate_labels(cfg.network.classes)?;
            Ok((st, c.hu.shape))
        })
        .collect::<Result<Vec<_>>>()?;
    if prepared.iter().all(|(st, _)| st.is_empty()) {
        return Err(Error::EmptyTensor);
    }

    let mut net = init_network::<f32>(&cfg.network, seed)?;
    let mut opt = OptimState::new(&net, cfg.optimizer.clone());
    let loss = cfg.loss_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut window = None;
        for _ in 0..MAX_WINDOW_DRAWS {
            let (st, shape) = &prepared[rng.random_range(0..prepared.len())];
            if st.is_empty() {
                continue;
            }
            let w = sample_training_window(st, *shape, &cfg.sampling, &mut rng)?;
            if !w.is_empty() {
                window = Some(w);
                break;
            }
        }
        let window = window.ok_or(Error::EmptyTensor)?;
        let value = train_step(&mut net, &mut opt, &window, &loss)?;
        on_step(step, value);
        losses.push(value);
    }
    let mut checkpoint = Checkpoint::from_network(&net, stats, seed, Some(&opt));
    checkpoint.window = Some(cfg.sampling.window);
    Ok(TrainOutcome { checkpoint, losses })
}

use serde::{Deserialize, Serialize};

use super::features::{self, Preprocessing};
use super::mlp::Mlp;
use super::{Recommender, RecommenderKind};
use crate::error::{Error, Result};
use crate::knapsack::{KnapsackInstance, Solution};

/// Imitation training hyper-parameters. The loss is always mean per-item
/// binary cross-entropy against the label selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Hidden layer widths between the `2n + 3` inputs and `n` outputs.
    pub hidden: Vec<usize>,
    pub preprocessing: Preprocessing,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.05,
            batch_size: 32,
            hidden: vec![90, 550, 90, 84],
            preprocessing: Preprocessing::default(),
        }
    }
}

impl TrainingConfig {
    pub fn layer_sizes(&self, items: usize) -> Vec<usize> {
        let mut sizes = vec![features::feature_len(items)];
        sizes.extend(&self.hidden);
        sizes.push(items);
        sizes
    }
}

/// `(instance, label)` pairs collected in one deployment epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pairs: Vec<(KnapsackInstance, Solution)>,
    pub epoch: u32,
}

impl LabeledDataset {
    pub fn new(pairs: Vec<(KnapsackInstance, Solution)>, epoch: u32) -> Result<Self> {
        for (k, (x, y)) in pairs.iter().enumerate() {
            y.ensure_feasible(x)
                .map_err(|e| Error::Data(format!("label {k}: {e}")))?;
        }
        Ok(Self { pairs, epoch })
    }

    pub fn pairs(&self) -> &[(KnapsackInstance, Solution)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub recommender: Recommender,
    /// Mean training loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
}

impl TrainedModel {
    pub fn initial_loss(&self) -> f64 {
        self.epoch_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Fits an imitation scorer to the dataset labels. The utility of the labels
/// is never consulted.
pub fn train_imitation(
    data: &LabeledDataset,
    cfg: &TrainingConfig,
    label: impl Into<String>,
    seed: u64,
) -> Result<TrainedModel> {
    let Some((first, _)) = data.pairs.first() else {
        return Err(Error::Data("empty training dataset".into()));
    };
    let n = first.item_count();
    if let Some((x, _)) = data.pairs.iter().find(|(x, _)| x.item_count() != n) {
        return Err(Error::Data(format!(
            "inconsistent item counts: {n} and {}",
            x.item_count()
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::Parameter(
            "epochs, batch size and learning rate must be positive".into(),
        ));
    }
    let samples: Vec<(Vec<f32>, Vec<f32>)> = data
        .pairs
        .iter()
        .map(|(x, y)| {
            let enc = features::encode(x, cfg.preprocessing);
            let target: Vec<f32> = y
                .selection()
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect();
            let target = enc.permute(&target);
            (enc.features, target)
        })
        .collect();
    let mut mlp = Mlp::new(&cfg.layer_sizes(n), seed);
    let epoch_losses = mlp.train(
        &samples,
        cfg.epochs,
        cfg.learning_rate,
        cfg.batch_size,
        crate::rng::derive_seed(seed, 1),
    );
    let mut recommender = Recommender::new(label, RecommenderKind::Imitation(mlp));
    recommender.preprocessing = cfg.preprocessing;
    Ok(TrainedModel {
        recommender,
        epoch_losses,
    })
}

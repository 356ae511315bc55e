use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Optimization hyperparameters shared by cue pretraining and detector
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Learning-rate multiplier for the freshly initialized selector and
    /// classification heads, relative to the encoder being trained.
    pub head_lr_scale: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            learning_rate: 2e-5,
            dropout: 0.2,
            batch_size: 16,
            max_epochs: 20,
            early_stop_patience: 3,
            seed: 0,
            head_lr_scale: 1.0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Validation,
            "learning rate must be positive, got {}",
            self.learning_rate
        );
        ensure!(
            self.head_lr_scale > 0.0 && self.head_lr_scale.is_finite(),
            Validation,
            "head_lr_scale must be positive, got {}",
            self.head_lr_scale
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            Validation,
            "dropout must lie in [0, 1), got {}",
            self.dropout
        );
        ensure!(
            self.batch_size > 0 && self.max_epochs > 0 && self.early_stop_patience > 0,
            Validation,
            "batch size, epochs and patience must be positive: {self:?}"
        );
        Ok(())
    }
}

/// Shuffled mini-batches of `0..n`.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

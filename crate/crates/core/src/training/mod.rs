//! Tokenizer fitting: composite loss, hand-written gradients and a
//! plain SGD loop with EMA centers.

mod fit;
mod grad;
mod loss;

use serde::{Deserialize, Serialize};

use crate::schedule::AnnealSchedule;

pub use fit::{fit_tokenizer, FitOutcome};
pub use grad::{
    assign_parameters, flatten_parameters, loss_and_gradient, LayerGradient, StackGradient,
};
pub use loss::{
    bpe_warmup_loss, length_surrogate_loss, reconstruction_loss, spread_loss, total_tokenizer_loss,
    LossBreakdown, LossContext, WarmupLoss, WarmupTargets,
};

/// Weights of the four tokenizer loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub spread: f64,
    pub length: f64,
    pub bpe: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: 1.0,
            spread: 0.1,
            length: 0.05,
            bpe: 0.2,
        }
    }
}

impl LossWeights {
    pub fn only_reconstruction() -> Self {
        Self {
            reconstruction: 1.0,
            spread: 0.0,
            length: 0.0,
            bpe: 0.0,
        }
    }
}

/// Optimizer and schedule settings for [`fit_tokenizer`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Temperature of the sigmoids in the soft length surrogate.
    pub length_temperature: f64,
    /// Cosine-decay the learning rate to zero over all steps.
    pub cosine_decay: bool,
    /// Spread margin, annealed over epochs.
    pub spread_margin: AnnealSchedule,
    /// Warm-up similarity threshold, annealed over epochs.
    pub merge_threshold: AnnealSchedule,
    /// Warm-up minimum pair count.
    pub n_min: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let epochs = 30;
        Self {
            learning_rate: 0.05,
            epochs,
            batch_size: 64,
            seed: 0,
            length_temperature: 0.1,
            cosine_decay: true,
            spread_margin: AnnealSchedule::spread_margin(epochs - 1),
            merge_threshold: AnnealSchedule::merge_threshold(epochs - 1),
            n_min: 20,
        }
    }
}

/// Mean loss components over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub reconstruction: f64,
    pub spread: f64,
    pub length: f64,
    pub bpe: f64,
}

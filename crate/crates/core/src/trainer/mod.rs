//! Deterministic training: toy pretraining, fine-tuning, dataset splits,
//! the optimizer and schedule, checkpoints and multi-seed studies.

mod checkpoint;
mod finetune;
mod optim;
mod pretrain;
mod rng;
mod schedule;
mod split;
mod variance;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, Metadata, FORMAT_VERSION, MAGIC,
};
pub use finetune::{
    effective_encoder_config, finetune, history_rows, initial_params, EpochRecord, FinetuneOutcome,
    HISTORY_HEADER,
};
pub use optim::{decays, AdamW, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, WEIGHT_DECAY};
pub use pretrain::{argmax, choose_masked, masked_token_accuracy, pretrain_toy, PretrainConfig};
pub use rng::{stream_rng, Stream};
pub use schedule::{lr_at_step, warmup_steps};
pub use split::{split_dataset, split_indices, Splits, MIN_PER_CLASS};
pub use variance::{variance_study, Summary, VarianceReport};

use crate::data::LabeledExample;
use crate::encoder::DEFAULT_INIT_STD;
use crate::error::{Error, Result};
use crate::strategies::StrategyConfig;

/// Labeled examples and the size of their label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub seed: u64,
    pub strategy: StrategyConfig,
    /// Overrides the checkpoint's dropout probability.
    pub dropout: Option<f64>,
    pub head_init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-5,
            epochs: 3,
            batch_size: 8,
            warmup_frac: 0.1,
            seed: 0,
            strategy: StrategyConfig::default(),
            dropout: None,
            head_init_std: DEFAULT_INIT_STD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config(format!("learning rate {} must be positive", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config(format!("warmup fraction {} outside [0,1)", self.warmup_frac)));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("dropout {p} outside [0,1)")));
            }
        }
        if !(self.head_init_std.is_finite() && self.head_init_std > 0.0) {
            return Err(Error::config("head init std must be positive"));
        }
        Ok(())
    }
}

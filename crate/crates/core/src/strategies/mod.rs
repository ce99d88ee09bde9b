//! Fine-tuning strategies for small, high-variance classification corpora:
//! grouped learning rates, mixout toward a pretrained snapshot, top-layer
//! re-initialization, intermediate-layer pooling and class-weighted
//! cross-entropy.

mod llrd;
mod loss;
mod mixout;
mod pooling;
mod reinit;

pub use llrd::{build_param_groups, layer_index, LlrdSetup, ParamGroup, FOUR_GROUP_MULTIPLIERS};
pub use loss::{
    class_weights_from_counts, cross_entropy_value, weighted_cross_entropy,
    weighted_cross_entropy_value, LossReduction,
};
pub use mixout::{bind_with_mixout, is_fully_connected_weight, mixout_mask, mixout_transform, MixoutConfig};
pub use pooling::{pool_states, pool_states_eval, PoolingMode};
pub use reinit::{reinit_top_layers, DEFAULT_REINIT_STD};

use std::fmt;

use crate::error::{Error, Result};

/// The knobs of one fine-tuning experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyConfig {
    pub llrd: LlrdSetup,
    pub mixout_p: Option<f64>,
    pub reinit_n: usize,
    pub pooling: PoolingMode,
    /// Per-class loss weights; `None` is plain cross-entropy.
    pub class_weights: Option<Vec<f64>>,
    pub reduction: LossReduction,
    pub reinit_std: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            llrd: LlrdSetup::Uniform,
            mixout_p: None,
            reinit_n: 0,
            pooling: PoolingMode::Final,
            class_weights: None,
            reduction: LossReduction::WeightedMean,
            reinit_std: DEFAULT_REINIT_STD,
        }
    }
}

impl StrategyConfig {
    /// Checks the configuration against an encoder depth.
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.pooling != PoolingMode::Final && self.reinit_n > 0 {
            return Err(Error::config(format!(
                "pooling {} cannot be combined with re-initialization of {} layers: \
                 intermediate-layer pooling experiments are isolated from re-init",
                self.pooling, self.reinit_n
            )));
        }
        if self.reinit_n > 3 {
            return Err(Error::config(format!(
                "reinit depth {} outside {{0, 1, 2, 3}}",
                self.reinit_n
            )));
        }
        if self.reinit_n > num_layers {
            return Err(Error::config(format!(
                "cannot re-initialize {} of {num_layers} layers",
                self.reinit_n
            )));
        }
        if self.pooling != PoolingMode::Final && num_layers < 4 {
            return Err(Error::config(format!(
                "pooling {} needs at least 4 layers, encoder has {num_layers}",
                self.pooling
            )));
        }
        if let Some(p) = self.mixout_p {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("mixout probability {p} outside [0,1)")));
            }
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::config("class weights must be positive and finite"));
            }
        }
        if !(self.reinit_std.is_finite() && self.reinit_std > 0.0) {
            return Err(Error::config("re-init std must be positive"));
        }
        Ok(())
    }
}

impl fmt::Display for StrategyConfig {
    /// A short model label in the style of a results table row.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        match self.llrd {
            LlrdSetup::Uniform => {}
            LlrdSetup::TwoGroup => parts.push("LLRD(2-Groups)".into()),
            LlrdSetup::FourGroup => parts.push("LLRD(4-Groups)".into()),
        }
        if self.reinit_n > 0 {
            parts.push(format!("Re-init({})", self.reinit_n));
        }
        match self.pooling {
            PoolingMode::Final => {}
            PoolingMode::AvgLast4 => parts.push("Avg Last 4 Layers".into()),
            PoolingMode::ConcatLast4 => parts.push("Concat Last 4 Layers".into()),
        }
        if let Some(p) = self.mixout_p {
            parts.push(format!("Mixout({p})"));
        }
        if self.class_weights.is_some() {
            parts.push("Weighted CE".into());
        }
        if parts.is_empty() {
            write!(f, "Baseline")
        } else {
            write!(f, "{}", parts.join(" + "))
        }
    }
}

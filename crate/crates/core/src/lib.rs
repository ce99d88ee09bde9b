//! From-scratch transformer fine-tuning lab.
//!
//! A reverse-mode autodiff engine over `f64` tensors, a small pre-norm
//! encoder with a classification head, the fine-tuning strategies
//! (grouped learning rates, mixout, re-initialization, layer pooling,
//! weighted loss), a deterministic trainer, classification metrics and
//! corpus loaders.

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod strategies;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use autodiff::{grad_check, Gradients, Tape, Var};
pub use encoder::{BoundParams, Encoder, EncoderConfig, HeadConfig, Mode, ParamMap};
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use strategies::{LlrdSetup, LossReduction, PoolingMode, StrategyConfig};
pub use tensor::Tensor;
pub use trainer::{Checkpoint, Dataset, TrainConfig};
pub use vocab::Vocabulary;

use std::path::PathBuf;

use clap::Args;

use ftlab_core::data::{corpus_stats, generate_synth, load_tsv, Stage, SynthTaskSpec, TsvColumns};
use ftlab_core::encoder::EncoderConfig;
use ftlab_core::strategies::{class_weights_from_counts, LlrdSetup, LossReduction, PoolingMode, StrategyConfig};
use ftlab_core::trainer::{Dataset, TrainConfig};
use ftlab_core::{Error, Result};

/// Where labeled examples come from: a TSV corpus or the synthetic task.
#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// Tab-separated corpus with a header row.
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Use the synthetic marker-token task instead of a corpus.
    #[arg(long)]
    pub synth: bool,
    /// Label schema of the corpus: 1 (binary) or 2 (six categories).
    #[arg(long, default_value = "1")]
    pub stage: Stage,
    #[arg(long, default_value = "text")]
    pub text_column: String,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    #[command(flatten)]
    pub synth_spec: SynthArgs,
}

#[derive(Args, Clone, Debug)]
pub struct SynthArgs {
    /// Number of generated examples (400 for fine-tuning, 2000 for
    /// pretraining when omitted).
    #[arg(long)]
    pub synth_examples: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub synth_classes: usize,
    #[arg(long, default_value_t = 40)]
    pub synth_vocab: usize,
    #[arg(long, default_value_t = 3)]
    pub synth_markers: usize,
    #[arg(long, default_value_t = 0.8)]
    pub synth_marker_p: f64,
    #[arg(long, default_value_t = 0.0)]
    pub synth_noise: f64,
    /// Comma-separated class priors; uniform when omitted.
    #[arg(long, value_delimiter = ',')]
    pub synth_priors: Vec<f64>,
    /// Generator seed; defaults to the run seed.
    #[arg(long)]
    pub synth_seed: Option<u64>,
}

impl SynthArgs {
    pub fn spec(&self, seed: u64) -> SynthTaskSpec {
        self.spec_with_default(seed, 400)
    }

    pub fn spec_with_default(&self, seed: u64, examples: usize) -> SynthTaskSpec {
        let priors = if self.synth_priors.is_empty() {
            vec![1.0 / self.synth_classes.max(1) as f64; self.synth_classes]
        } else {
            self.synth_priors.clone()
        };
        SynthTaskSpec {
            num_classes: self.synth_classes,
            vocab_size: self.synth_vocab,
            markers_per_class: self.synth_markers,
            marker_p: self.synth_marker_p,
            noise_rate: self.synth_noise,
            priors,
            num_examples: self.synth_examples.unwrap_or(examples),
            seed: self.synth_seed.unwrap_or(seed),
            ..SynthTaskSpec::default()
        }
    }
}

impl DataArgs {
    /// Loads the dataset; `seed` seeds the synthetic generator when no
    /// explicit generator seed is given.
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        if let Some(path) = &self.data {
            let cols = TsvColumns {
                text: self.text_column.clone(),
                label: self.label_column.clone(),
            };
            let corpus = load_tsv(path, self.stage, &cols)?;
            if corpus.skipped > 0 {
                eprintln!("skipped {} rows outside the stage-{} task", corpus.skipped, self.stage);
            }
            Ok(Dataset {
                examples: corpus.examples,
                num_classes: self.stage.schema().num_classes(),
            })
        } else if self.synth {
            let spec = self.synth_spec.spec(seed);
            Ok(Dataset {
                examples: generate_synth(&spec)?,
                num_classes: spec.num_classes,
            })
        } else {
            Err(Error::Config("no data source: pass --data <tsv> or --synth".into()))
        }
    }

    /// Canonical description for manifests and run ids.
    pub fn describe(&self, seed: u64) -> String {
        match &self.data {
            Some(p) => format!(
                "data={}\nstage={}\ntext_column={}\nlabel_column={}",
                p.display(),
                self.stage,
                self.text_column,
                self.label_column
            ),
            None => {
                let s = self.synth_spec.spec(seed);
                format!(
                    "data=synth\nsynth.classes={}\nsynth.vocab={}\nsynth.markers={}\nsynth.marker_p={}\nsynth.noise={}\nsynth.priors={:?}\nsynth.examples={}\nsynth.seed={}",
                    s.num_classes, s.vocab_size, s.markers_per_class, s.marker_p, s.noise_rate, s.priors, s.num_examples, s.seed
                )
            }
        }
    }
}

#[derive(Args, Clone, Debug)]
pub struct EncoderArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub ff_dim: usize,
    /// Upper bound on the vocabulary size, specials included.
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
}

impl EncoderArgs {
    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ff_dim: self.ff_dim,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_len,
            dropout_p: self.dropout,
        }
    }
}

/// Strategy flags shared by the fine-tuning commands.
#[derive(Args, Clone, Debug)]
pub struct StrategyArgs {
    /// Learning-rate grouping: uniform, 2group or 4group.
    #[arg(long, default_value = "uniform")]
    pub llrd: LlrdSetup,
    /// Mixout probability toward the pretrained weights.
    #[arg(long)]
    pub mixout: Option<f64>,
    /// Number of top encoder blocks to re-initialize.
    #[arg(long, default_value_t = 0)]
    pub reinit: usize,
    /// Sequence representation: final, avg4 or concat4.
    #[arg(long, default_value = "final")]
    pub pool: PoolingMode,
    /// Weight the loss by inverse class frequency.
    #[arg(long)]
    pub weighted_loss: bool,
    /// Weighted-loss normalization: weighted_mean or mean.
    #[arg(long, default_value = "weighted_mean")]
    pub reduction: LossReduction,
    /// Overrides the checkpoint's dropout probability.
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 3e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub warmup: f64,
}

/// Builds a training config; class weights come from `dataset` counts when
/// weighted loss is requested.
pub fn train_config(
    train: &TrainArgs,
    strategy: &StrategyArgs,
    dataset: &Dataset,
    seed: u64,
) -> Result<TrainConfig> {
    let class_weights = if strategy.weighted_loss {
        let stats = corpus_stats(&dataset.examples, dataset.num_classes)?;
        Some(class_weights_from_counts(&stats.class_counts)?)
    } else {
        None
    };
    Ok(TrainConfig {
        base_lr: train.lr,
        epochs: train.epochs,
        batch_size: train.batch_size,
        warmup_frac: train.warmup,
        seed,
        strategy: StrategyConfig {
            llrd: strategy.llrd,
            mixout_p: strategy.mixout,
            reinit_n: strategy.reinit,
            pooling: strategy.pool,
            class_weights,
            reduction: strategy.reduction,
            ..StrategyConfig::default()
        },
        dropout: strategy.dropout,
        ..TrainConfig::default()
    })
}

/// Canonical `key=value` text of a training config, one key per line.
pub fn describe_config(cfg: &TrainConfig) -> String {
    let s = &cfg.strategy;
    let weights = s
        .class_weights
        .as_ref()
        .map(|w| w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .unwrap_or_else(|| "none".into());
    [
        format!("lr={}", cfg.base_lr),
        format!("epochs={}", cfg.epochs),
        format!("batch_size={}", cfg.batch_size),
        format!("warmup={}", cfg.warmup_frac),
        format!("llrd={}", s.llrd),
        format!("mixout={}", s.mixout_p.map_or("none".into(), |p| p.to_string())),
        format!("reinit={}", s.reinit_n),
        format!("pool={}", s.pooling),
        format!("class_weights={weights}"),
        format!("reduction={:?}", s.reduction),
        format!("dropout={}", cfg.dropout.map_or("checkpoint".into(), |p| p.to_string())),
    ]
    .join("\n")
}

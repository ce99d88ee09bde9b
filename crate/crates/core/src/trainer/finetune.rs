use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, CheckpointKind, Metadata};
use super::optim::AdamW;
use super::pretrain::argmax;
use super::rng::{stream_rng, Stream};
use super::schedule::lr_at_step;
use super::split::split_dataset;
use super::{Dataset, TrainConfig};
use crate::autodiff::{Tape, Var};
use crate::encoder::{classify, BoundParams, Encoder, EncoderConfig, HeadConfig, Mode, ParamMap};
use crate::error::{Error, Result};
use crate::metrics::{confusion, default_report, MetricsReport};
use crate::strategies::{
    bind_with_mixout, build_param_groups, pool_states, reinit_top_layers, weighted_cross_entropy,
    MixoutConfig, ParamGroup,
};
use crate::vocab::Vocabulary;

/// Validation metrics after one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Final-epoch weights (encoder and head).
    pub checkpoint: Checkpoint,
    /// One record per epoch.
    pub history: Vec<EpochRecord>,
    /// Test metrics of the final-epoch weights.
    pub test: MetricsReport,
    pub groups: Vec<ParamGroup>,
    pub total_steps: usize,
    /// Sizes of the train, validation and test splits.
    pub split_sizes: [usize; 3],
}

struct Prepared {
    ids: Vec<Vec<usize>>,
    labels: Vec<usize>,
}

fn prepare(examples: &[crate::data::LabeledExample], vocab: &Vocabulary, max_len: usize) -> Result<Prepared> {
    let ids = examples
        .iter()
        .map(|e| Ok(vocab.tokenize(&e.text, max_len)?.trimmed().to_vec()))
        .collect::<Result<_>>()?;
    Ok(Prepared {
        ids,
        labels: examples.iter().map(|e| e.label).collect(),
    })
}

/// Encoder, pooling and head in one forward pass; logits `[C]`.
fn forward(
    encoder: &Encoder,
    tape: &mut Tape,
    bound: &BoundParams,
    ids: &[usize],
    config: &TrainConfig,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let mask = vec![1u8; ids.len()];
    let out = encoder.encode(tape, bound, ids, &mask, mode)?;
    let features = pool_states(tape, &out.states, out.pooled, config.strategy.pooling)?;
    classify(tape, bound, features, mode)
}

/// Predicted class of every sequence, eval mode.
pub(crate) fn predict(encoder: &Encoder, params: &ParamMap, seqs: &[Vec<usize>], config: &TrainConfig) -> Result<Vec<usize>> {
    seqs.par_iter()
        .map(|ids| {
            let mut tape = Tape::new();
            let bound = BoundParams::bind_frozen(&mut tape, params);
            let logits = forward(encoder, &mut tape, &bound, ids, config, &mut Mode::Eval)?;
            Ok(argmax(tape.value(logits).data()))
        })
        .collect()
}

fn evaluate(encoder: &Encoder, params: &ParamMap, data: &Prepared, config: &TrainConfig, num_classes: usize) -> Result<MetricsReport> {
    let pred = predict(encoder, params, &data.ids, config)?;
    default_report(&confusion(&data.labels, &pred, num_classes)?)
}

/// Encoder config the run trains with: the checkpoint's, with the dropout
/// override applied.
pub fn effective_encoder_config(pretrained: &Checkpoint, config: &TrainConfig) -> EncoderConfig {
    let mut enc = pretrained.metadata.encoder.clone();
    if let Some(p) = config.dropout {
        enc.dropout_p = p;
    }
    enc
}

/// Parameters at the start of training: the pretrained encoder after
/// re-initialization, plus a freshly initialized head. Both draw from the
/// seed's init stream, re-init first.
pub fn initial_params(pretrained: &Checkpoint, num_classes: usize, config: &TrainConfig) -> Result<ParamMap> {
    let enc = &pretrained.metadata.encoder;
    let mut rng = stream_rng(config.seed, Stream::Init);
    let s = &config.strategy;
    let mut params = reinit_top_layers(&pretrained.encoder_params(), enc.num_layers, s.reinit_n, s.reinit_std, &mut rng)?;
    let head = HeadConfig::new(s.pooling.feature_dim(enc.hidden), num_classes)?;
    params.extend(head.init_params(&mut rng, config.head_init_std));
    Ok(params)
}

/// Fine-tunes `pretrained` on `dataset` with the configured strategies.
///
/// Order of operations: validation, stratified split, top-layer
/// re-initialization, mixout snapshot, parameter groups, then
/// `epochs × ⌈|train| / batch⌉` optimizer steps. Deterministic in
/// `config.seed`.
pub fn finetune(pretrained: &Checkpoint, dataset: &Dataset, config: &TrainConfig) -> Result<FinetuneOutcome> {
    pretrained.check_encoder()?;
    let enc_cfg = effective_encoder_config(pretrained, config);
    config.validate()?;
    config.strategy.validate(enc_cfg.num_layers)?;
    enc_cfg.validate()?;
    let c = dataset.num_classes;
    if let Some(w) = &config.strategy.class_weights {
        if w.len() != c {
            return Err(Error::config(format!("{} class weights for {c} classes", w.len())));
        }
    }
    if let Some(e) = dataset.examples.iter().find(|e| e.label >= c) {
        return Err(Error::data(format!("label {} outside [0, {c})", e.label)));
    }
    let vocab = pretrained.metadata.vocabulary()?;
    if vocab.len() > enc_cfg.vocab_size {
        return Err(Error::contract(format!(
            "vocabulary of {} tokens exceeds the embedding table of {}",
            vocab.len(),
            enc_cfg.vocab_size
        )));
    }
    let encoder = Encoder::new(enc_cfg.clone())?;

    let splits = split_dataset(&dataset.examples, config.seed)?;
    let train = prepare(&splits.train, &vocab, enc_cfg.max_seq_len)?;
    let val = prepare(&splits.val, &vocab, enc_cfg.max_seq_len)?;
    let test = prepare(&splits.test, &vocab, enc_cfg.max_seq_len)?;

    let mut params = initial_params(pretrained, c, config)?;
    let snapshot = params.clone();
    let names: Vec<&String> = params.keys().collect();
    let groups = build_param_groups(&names, enc_cfg.num_layers, config.strategy.llrd, config.base_lr)?;
    let group_lr: IndexMap<String, f64> = groups
        .iter()
        .flat_map(|g| g.param_names.iter().map(move |n| (n.clone(), g.lr)))
        .collect();

    let steps_per_epoch = train.ids.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let mixout_p = config.strategy.mixout_p.filter(|p| *p > 0.0);
    let dropout_p = if mixout_p.is_some() { 0.0 } else { enc_cfg.dropout_p };
    let weights = config.strategy.class_weights.as_deref();

    let mut opt = AdamW::new(&params);
    let mut masks = stream_rng(config.seed, Stream::Masks);
    let mut batch_stream = stream_rng(config.seed, Stream::Batch);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.ids.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(batch_stream.random()));
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = match mixout_p {
                Some(p) => bind_with_mixout(&mut tape, &params, &MixoutConfig::new(p, &snapshot)?, &mut masks)?,
                None => BoundParams::bind(&mut tape, &params),
            };
            let mut rows = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut mode = Mode::Train {
                    dropout_p,
                    rng: &mut masks,
                };
                let logits = forward(&encoder, &mut tape, &bound, &train.ids[i], config, &mut mode)?;
                rows.push(tape.reshape(logits, &[1, c])?);
            }
            let logits = tape.concat_rows(&rows)?;
            let targets: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let loss = weighted_cross_entropy(&mut tape, logits, &targets, weights, config.strategy.reduction)?;
            loss_sum += tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let gmap: IndexMap<String, Vec<f64>> = bound
                .leaves()
                .iter()
                .map(|(n, v)| (n.clone(), grads.get(*v)))
                .collect();
            let scale = lr_at_step(step, total_steps, 1.0, config.warmup_frac)?;
            opt.step(&mut params, &gmap, |n| group_lr[n] * scale)?;
            step += 1;
        }
        history.push(EpochRecord {
            epoch,
            mean_train_loss: loss_sum / steps_per_epoch as f64,
            val: evaluate(&encoder, &params, &val, config, c)?,
        });
    }

    let test_report = evaluate(&encoder, &params, &test, config, c)?;
    let mut metadata = Metadata::new(CheckpointKind::Finetuned, enc_cfg, &vocab, config.seed);
    metadata.extra.insert("num_classes".into(), c.to_string());
    metadata.extra.insert("pooling".into(), config.strategy.pooling.to_string());
    metadata.extra.insert("strategy".into(), config.strategy.to_string());
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint {
            tensors: params,
            metadata,
        },
        history,
        test: test_report,
        groups,
        total_steps,
        split_sizes: [train.ids.len(), val.ids.len(), test.ids.len()],
    })
}

/// Header of the history CSV.
pub const HISTORY_HEADER: &str = "run_id,seed,epoch,split,precision,recall,accuracy,f_score";

/// History rows: one `val` row per epoch and a final `test` row.
pub fn history_rows(run_id: &str, seed: u64, outcome: &FinetuneOutcome) -> Vec<String> {
    let row = |epoch: usize, split: &str, r: &MetricsReport| {
        format!(
            "{run_id},{seed},{epoch},{split},{},{},{},{}",
            r.precision, r.recall, r.accuracy, r.f_score
        )
    };
    let mut rows: Vec<String> = outcome.history.iter().map(|h| row(h.epoch, "val", &h.val)).collect();
    rows.push(row(outcome.history.len(), "test", &outcome.test));
    rows
}

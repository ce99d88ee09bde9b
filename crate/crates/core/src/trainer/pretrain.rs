//! Masked-token pretraining that manufactures the snapshot fine-tuning
//! starts from.
//!
//! Predictions at masked positions use the final hidden state, normalized
//! by the pooler's layer norm, against the token embedding table (tied
//! output weights), so no parameters beyond the encoder's are needed.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, CheckpointKind, Metadata};
use super::optim::AdamW;
use super::rng::{stream_rng, Stream};
use super::schedule::lr_at_step;
use crate::autodiff::{Tape, Var};
use crate::encoder::{BoundParams, Encoder, EncoderConfig, Mode, DEFAULT_INIT_STD, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, MASK};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    /// `vocab_size` caps the vocabulary built from the corpus and is then
    /// set to its actual size.
    pub encoder: EncoderConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub mask_frac: f64,
    pub init_std: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            steps: 600,
            batch_size: 16,
            lr: 2e-3,
            warmup_frac: 0.1,
            mask_frac: 0.15,
            init_std: DEFAULT_INIT_STD,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("pretraining batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("pretraining lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config("pretraining warmup fraction outside [0,1)"));
        }
        if !(self.mask_frac > 0.0 && self.mask_frac <= 1.0) {
            return Err(Error::config("mask fraction outside (0,1]"));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::config("init std must be positive"));
        }
        Ok(())
    }
}

/// Picks masked positions among the non-special positions `1..len-1`:
/// each with probability `frac`, at least one. Empty when there are none.
pub fn choose_masked<R: Rng + ?Sized>(len: usize, frac: f64, rng: &mut R) -> Vec<usize> {
    if len <= 2 {
        return Vec::new();
    }
    let mut picked: Vec<usize> = (1..len - 1).filter(|_| rng.random::<f64>() < frac).collect();
    if picked.is_empty() {
        picked.push(rng.random_range(1..len - 1));
    }
    picked
}

/// Log-probabilities `[m × V]` over the vocabulary at `positions`.
fn masked_log_probs(
    encoder: &Encoder,
    tape: &mut Tape,
    params: &BoundParams,
    ids: &[usize],
    positions: &[usize],
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let mask = vec![1u8; ids.len()];
    let out = encoder.encode(tape, params, ids, &mask, mode)?;
    let last = *out.states.last().expect("encoder returns L + 1 states");
    let rows = tape.gather_rows(last, positions)?;
    let g = params.get("pooler.norm.gain")?;
    let b = params.get("pooler.norm.bias")?;
    let normed = tape.layer_norm(rows, g, b, LAYER_NORM_EPS)?;
    let table = tape.transpose(params.get("embed.token.weight")?)?;
    let logits = tape.matmul(normed, table)?;
    tape.log_softmax(logits, 1)
}

fn masked_copy(ids: &[usize], positions: &[usize]) -> Vec<usize> {
    let mut m = ids.to_vec();
    for &p in positions {
        m[p] = MASK;
    }
    m
}

/// Builds the vocabulary and tokenized corpus for `config`.
fn prepare(corpus: &[String], config: &PretrainConfig) -> Result<(Vocabulary, EncoderConfig, Vec<Vec<usize>>)> {
    if corpus.is_empty() {
        return Err(Error::data("pretraining corpus is empty"));
    }
    config.validate()?;
    let vocab = Vocabulary::build(corpus.iter().map(String::as_str), config.encoder.vocab_size)?;
    let enc = EncoderConfig {
        vocab_size: vocab.len(),
        ..config.encoder.clone()
    };
    enc.validate()?;
    let seqs = corpus
        .iter()
        .map(|t| Ok(vocab.tokenize(t, enc.max_seq_len)?.trimmed().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((vocab, enc, seqs))
}

/// Trains an encoder from scratch with the masked-token objective for
/// `config.steps` updates.
pub fn pretrain_toy(corpus: &[String], config: &PretrainConfig, seed: u64) -> Result<Checkpoint> {
    let (vocab, enc, seqs) = prepare(corpus, config)?;
    let encoder = Encoder::new(enc.clone())?;
    let mut params = enc.init_params(&mut stream_rng(seed, Stream::Init), config.init_std);
    let mut opt = AdamW::new(&params);
    let mut masks = stream_rng(seed, Stream::Masks);
    let mut batch_rng = stream_rng(seed, Stream::Batch);
    let mut order: Vec<usize> = Vec::new();

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..seqs.len()).collect();
                order.shuffle(&mut batch_rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled above"));
        }

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let mut terms = Vec::new();
        let mut count = 0usize;
        for &i in &batch {
            let ids = &seqs[i];
            let positions = choose_masked(ids.len(), config.mask_frac, &mut masks);
            if positions.is_empty() {
                continue;
            }
            let targets: Vec<usize> = positions.iter().map(|&p| ids[p]).collect();
            let input = masked_copy(ids, &positions);
            let mut mode = Mode::Train {
                dropout_p: enc.dropout_p,
                rng: &mut masks,
            };
            let logp = masked_log_probs(&encoder, &mut tape, &bound, &input, &positions, &mut mode)?;
            let picked = tape.pick(logp, &targets)?;
            terms.push(tape.sum(picked));
            count += positions.len();
        }
        if count == 0 {
            continue;
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t)?;
        }
        let loss = tape.scale(total, -1.0 / count as f64);
        let grads = tape.backward(loss)?;
        let gmap: IndexMap<String, Vec<f64>> = bound
            .leaves()
            .iter()
            .map(|(n, v)| (n.clone(), grads.get(*v)))
            .collect();
        let lr = lr_at_step(step, config.steps, config.lr, config.warmup_frac)?;
        opt.step(&mut params, &gmap, |_| lr)?;
    }

    Ok(Checkpoint {
        tensors: params,
        metadata: Metadata::new(CheckpointKind::Pretrained, enc, &vocab, seed),
    })
}

/// Fraction of masked positions whose original token is the top
/// prediction, over `texts` masked with the same rule as training.
pub fn masked_token_accuracy(ckpt: &Checkpoint, texts: &[String], mask_frac: f64, seed: u64) -> Result<f64> {
    let vocab = ckpt.metadata.vocabulary()?;
    let enc = ckpt.metadata.encoder.clone();
    let encoder = Encoder::new(enc.clone())?;
    let mut rng = stream_rng(seed, Stream::Masks);
    let mut jobs = Vec::new();
    for t in texts {
        let ids = vocab.tokenize(t, enc.max_seq_len)?.trimmed().to_vec();
        let positions = choose_masked(ids.len(), mask_frac, &mut rng);
        if !positions.is_empty() {
            jobs.push((ids, positions));
        }
    }
    let params = ckpt.encoder_params();
    let hits: Vec<(usize, usize)> = jobs
        .par_iter()
        .map(|(ids, positions)| {
            let mut tape = Tape::new();
            let bound = BoundParams::bind_frozen(&mut tape, &params);
            let input = masked_copy(ids, positions);
            let logp = masked_log_probs(&encoder, &mut tape, &bound, &input, positions, &mut Mode::Eval)?;
            let v = tape.value(logp);
            let width = v.dims()[1];
            let correct = positions
                .iter()
                .enumerate()
                .filter(|(r, &p)| argmax(&v.data()[r * width..(r + 1) * width]) == ids[p])
                .count();
            Ok((correct, positions.len()))
        })
        .collect::<Result<_>>()?;
    let (c, n) = hits.iter().fold((0, 0), |(a, b), (c, n)| (a + c, b + n));
    if n == 0 {
        return Err(Error::data("no maskable positions in evaluation texts"));
    }
    Ok(c as f64 / n as f64)
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

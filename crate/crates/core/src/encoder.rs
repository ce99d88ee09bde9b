//! A small pre-norm transformer encoder and the two-hidden-layer tanh
//! classification head.
//!
//! Parameters live in a flat, ordered [`ParamMap`] keyed by hierarchical
//! names. The prefixes are a contract that parameter grouping, re-init and
//! mixout depend on:
//!
//! - `embed.*` token/position embeddings and the embedding layer norm
//! - `layer.<i>.*` transformer block `i` (0-based)
//! - `pooler.*` final layer norm and the tanh pooler over the BOS position
//! - `head.*` the classification head
//!
//! Tensors whose names end in `.weight` are matrices, `.bias` are additive
//! offsets and `.gain` are layer-norm scales.

use indexmap::IndexMap;
use rand::{Rng, RngCore};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor.
pub type ParamMap = IndexMap<String, Tensor>;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const HEAD_HIDDEN: [usize; 2] = [100, 100];
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// Additive attention bias on masked keys; `exp` of it underflows to 0.
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 32,
            heads: 4,
            ff_dim: 128,
            vocab_size: 64,
            max_seq_len: 32,
            dropout_p: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_seq_len < 3 {
            return Err(Error::config("max_seq_len must be at least 3"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("dropout_p {} outside [0,1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Shapes of every encoder parameter, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden, self.ff_dim);
        let mut out = vec![
            ("embed.token.weight".to_string(), vec![self.vocab_size, h]),
            ("embed.position.weight".to_string(), vec![self.max_seq_len, h]),
            ("embed.norm.gain".to_string(), vec![h]),
            ("embed.norm.bias".to_string(), vec![h]),
        ];
        for i in 0..self.num_layers {
            let p = |s: &str| format!("layer.{i}.{s}");
            out.push((p("attention_norm.gain"), vec![h]));
            out.push((p("attention_norm.bias"), vec![h]));
            for proj in ["query", "key", "value", "output"] {
                out.push((p(&format!("attention.{proj}.weight")), vec![h, h]));
                out.push((p(&format!("attention.{proj}.bias")), vec![h]));
            }
            out.push((p("ffn_norm.gain"), vec![h]));
            out.push((p("ffn_norm.bias"), vec![h]));
            out.push((p("ffn.input.weight"), vec![h, f]));
            out.push((p("ffn.input.bias"), vec![f]));
            out.push((p("ffn.output.weight"), vec![f, h]));
            out.push((p("ffn.output.bias"), vec![h]));
        }
        out.push(("pooler.norm.gain".to_string(), vec![h]));
        out.push(("pooler.norm.bias".to_string(), vec![h]));
        out.push(("pooler.dense.weight".to_string(), vec![h, h]));
        out.push(("pooler.dense.bias".to_string(), vec![h]));
        out
    }

    /// Fresh encoder parameters: weights `Normal(0, std²)`, biases 0,
    /// layer-norm gains 1.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, std: f64) -> ParamMap {
        init_from_shapes(self.param_shapes(), rng, std)
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum()
    }
}

fn init_from_shapes<R: Rng + ?Sized>(
    shapes: Vec<(String, Vec<usize>)>,
    rng: &mut R,
    std: f64,
) -> ParamMap {
    shapes
        .into_iter()
        .map(|(name, dims)| {
            let t = init_tensor(&name, &dims, rng, std);
            (name, t)
        })
        .collect()
}

/// Initial value for a parameter, chosen by its name suffix.
pub fn init_tensor<R: Rng + ?Sized>(name: &str, dims: &[usize], rng: &mut R, std: f64) -> Tensor {
    if name.ends_with(".gain") {
        Tensor::ones(dims)
    } else if name.ends_with(".bias") {
        Tensor::zeros(dims)
    } else {
        Tensor::randn(dims, std, rng)
    }
}

/// The classification head: affine → tanh → affine → tanh → affine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub num_classes: usize,
}

impl HeadConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
        }
        if input_dim == 0 {
            return Err(Error::config("head input dimension must be positive"));
        }
        Ok(Self {
            input_dim,
            num_classes,
        })
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [h1, h2] = HEAD_HIDDEN;
        vec![
            ("head.hidden1.weight".into(), vec![self.input_dim, h1]),
            ("head.hidden1.bias".into(), vec![h1]),
            ("head.hidden2.weight".into(), vec![h1, h2]),
            ("head.hidden2.bias".into(), vec![h2]),
            ("head.output.weight".into(), vec![h2, self.num_classes]),
            ("head.output.bias".into(), vec![self.num_classes]),
        ]
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, std: f64) -> ParamMap {
        init_from_shapes(self.param_shapes(), rng, std)
    }
}

/// Parameters placed on a tape. `leaves` are the differentiable inputs;
/// `effective` is what the forward pass reads, which differs from the leaf
/// when a transform such as mixout sits in between.
#[derive(Default)]
pub struct BoundParams {
    leaves: Vec<(String, Var)>,
    effective: IndexMap<String, Var>,
}

impl BoundParams {
    /// Binds every tensor of `params` as a leaf used unchanged.
    pub fn bind(tape: &mut Tape, params: &ParamMap) -> Self {
        let mut b = Self::default();
        for (name, t) in params {
            let v = tape.leaf(t.clone());
            b.insert(name.clone(), v, v);
        }
        b
    }

    /// Binds every tensor of `params` as a constant.
    pub fn bind_frozen(tape: &mut Tape, params: &ParamMap) -> Self {
        let mut b = Self::default();
        for (name, t) in params {
            let v = tape.constant(t.clone());
            b.effective.insert(name.clone(), v);
        }
        b
    }

    pub fn insert(&mut self, name: String, leaf: Var, effective: Var) {
        self.leaves.push((name.clone(), leaf));
        self.effective.insert(name, effective);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.effective
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn leaves(&self) -> &[(String, Var)] {
        &self.leaves
    }
}

/// Whether stochastic regularizers are active in a forward pass.
pub enum Mode<'a> {
    Eval,
    Train {
        /// Dropout on the inputs of the fully connected layers.
        dropout_p: f64,
        rng: &'a mut dyn RngCore,
    },
}

impl Mode<'_> {
    fn apply_dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { dropout_p, rng } => tape.dropout(x, *dropout_p, &mut **rng),
        }
    }
}

/// Outputs of one encoder pass on a tape.
pub struct EncoderOutput {
    /// `L + 1` hidden states `[seq × H]`; index 0 is the embedding output.
    pub states: Vec<Var>,
    /// Pooler output `[H]`.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn linear(&self, tape: &mut Tape, p: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
        let w = p.get(&format!("{prefix}.weight"))?;
        let b = p.get(&format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }

    fn norm(&self, tape: &mut Tape, p: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
        let g = p.get(&format!("{prefix}.gain"))?;
        let b = p.get(&format!("{prefix}.bias"))?;
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// Runs the encoder over one sequence.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        ids: &[usize],
        mask: &[u8],
        mode: &mut Mode<'_>,
    ) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let seq = ids.len();
        if seq == 0 || seq > cfg.max_seq_len || mask.len() != seq {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![seq, mask.len()],
                rhs: vec![cfg.max_seq_len],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }

        let tok = tape.gather_rows(params.get("embed.token.weight")?, ids)?;
        let positions: Vec<usize> = (0..seq).collect();
        let pos = tape.gather_rows(params.get("embed.position.weight")?, &positions)?;
        let emb = tape.add(tok, pos)?;
        let mut x = self.norm(tape, params, emb, "embed.norm")?;
        let mut states = vec![x];

        let key_bias = if mask.iter().all(|&m| m == 1) {
            None
        } else {
            let mut data = vec![0.0; seq * seq];
            for row in data.chunks_mut(seq) {
                for (v, &m) in row.iter_mut().zip(mask) {
                    if m == 0 {
                        *v = MASKED_SCORE;
                    }
                }
            }
            Some(tape.constant(Tensor::new(&[seq, seq], data)?))
        };

        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for i in 0..cfg.num_layers {
            let pre = format!("layer.{i}");
            let h = self.norm(tape, params, x, &format!("{pre}.attention_norm"))?;
            let q = self.linear(tape, params, h, &format!("{pre}.attention.query"))?;
            let k = self.linear(tape, params, h, &format!("{pre}.attention.key"))?;
            let v = self.linear(tape, params, h, &format!("{pre}.attention.value"))?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for a in 0..cfg.heads {
                let qh = tape.slice_cols(q, a * dh, dh)?;
                let kh = tape.slice_cols(k, a * dh, dh)?;
                let vh = tape.slice_cols(v, a * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let mut scores = tape.scale(scores, inv_sqrt);
                if let Some(kb) = key_bias {
                    scores = tape.add(scores, kb)?;
                }
                let probs = tape.softmax(scores, 1)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let ctx = tape.concat_cols(&heads)?;
            let attn = self.linear(tape, params, ctx, &format!("{pre}.attention.output"))?;
            x = tape.add(x, attn)?;

            let h = self.norm(tape, params, x, &format!("{pre}.ffn_norm"))?;
            let h = mode.apply_dropout(tape, h)?;
            let f = self.linear(tape, params, h, &format!("{pre}.ffn.input"))?;
            let f = tape.gelu(f);
            let f = mode.apply_dropout(tape, f)?;
            let f = self.linear(tape, params, f, &format!("{pre}.ffn.output"))?;
            x = tape.add(x, f)?;
            states.push(x);
        }

        let normed = self.norm(tape, params, x, "pooler.norm")?;
        let first = tape.gather_rows(normed, &[0])?;
        let dense = self.linear(tape, params, first, "pooler.dense")?;
        let pooled = tape.tanh(dense);
        let pooled = tape.reshape(pooled, &[cfg.hidden])?;
        Ok(EncoderOutput { states, pooled })
    }

    /// Eval-mode encoder pass on plain tensors: the `L + 1` hidden states
    /// and the pooled vector.
    pub fn encode_eval(
        &self,
        params: &ParamMap,
        ids: &[usize],
        mask: &[u8],
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind_frozen(&mut tape, params);
        let out = self.encode(&mut tape, &bound, ids, mask, &mut Mode::Eval)?;
        let states = out.states.iter().map(|v| tape.value(*v).clone()).collect();
        Ok((states, tape.value(out.pooled).clone()))
    }
}

/// Runs the classification head on a feature vector `[D]`, giving logits `[C]`.
pub fn classify(
    tape: &mut Tape,
    params: &BoundParams,
    features: Var,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let w1 = params.get("head.hidden1.weight")?;
    let d = tape.value(w1).dims()[0];
    let fd = tape.dims(features).to_vec();
    if fd != [d] {
        return Err(Error::Shape {
            op: "classify",
            lhs: fd,
            rhs: vec![d],
        });
    }
    let mut x = tape.reshape(features, &[1, d])?;
    for layer in ["hidden1", "hidden2"] {
        x = mode.apply_dropout(tape, x)?;
        let w = params.get(&format!("head.{layer}.weight"))?;
        let b = params.get(&format!("head.{layer}.bias"))?;
        let y = tape.matmul(x, w)?;
        let y = tape.add_row_bias(y, b)?;
        x = tape.tanh(y);
    }
    let w = params.get("head.output.weight")?;
    let b = params.get("head.output.bias")?;
    let y = tape.matmul(x, w)?;
    let y = tape.add_row_bias(y, b)?;
    let c = tape.dims(y)[1];
    tape.reshape(y, &[c])
}

/// Eval-mode head on plain tensors.
pub fn classify_eval(head: &ParamMap, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind_frozen(&mut tape, head);
    let f = tape.constant(features.clone());
    let out = classify(&mut tape, &bound, f, &mut Mode::Eval)?;
    Ok(tape.value(out).clone())
}

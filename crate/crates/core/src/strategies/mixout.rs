//! Mixout: stochastic replacement of weights by their pretrained values.
//!
//! Each element is kept with probability `1 - p` and swapped for the
//! target value otherwise, then rescaled around the target so that
//! `E[W_eff] = W`:
//!
//! ```text
//! W_eff = (M ⊙ W + (1 - M) ⊙ W_pre - p · W_pre) / (1 - p)
//!       = W_pre + M ⊙ (W - W_pre) / (1 - p)
//! ```
//!
//! The second form is what is evaluated. Gradients reach only kept
//! elements, scaled by `1 / (1 - p)`.

use rand::Rng;

use crate::autodiff::Tape;
use crate::encoder::{BoundParams, ParamMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mixout probability and the frozen snapshot it pulls toward.
#[derive(Clone, Debug)]
pub struct MixoutConfig<'a> {
    pub p: f64,
    pub target: &'a ParamMap,
}

impl<'a> MixoutConfig<'a> {
    pub fn new(p: f64, target: &'a ParamMap) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("mixout probability {p} outside [0,1)")));
        }
        Ok(Self { p, target })
    }
}

/// Fully connected weight matrices that mixout (and the matching dropout)
/// applies to: the feed-forward sublayers and the head's hidden layers.
pub fn is_fully_connected_weight(name: &str) -> bool {
    (name.starts_with("layer.")
        && (name.ends_with(".ffn.input.weight") || name.ends_with(".ffn.output.weight")))
        || name == "head.hidden1.weight"
        || name == "head.hidden2.weight"
}

/// Draws a mixout mask of `numel` elements holding `1/(1-p)` for kept
/// elements and `0` for replaced ones.
pub fn mixout_mask<R: Rng + ?Sized>(numel: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..numel)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Applies mixout to `w` toward `w_pre` with a freshly drawn mask.
/// With `p = 0` the input is returned unchanged.
pub fn mixout_transform<R: Rng + ?Sized>(
    w: &Tensor,
    w_pre: &Tensor,
    p: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if w.dims() != w_pre.dims() {
        return Err(Error::contract(format!(
            "mixout target shape {:?} differs from weight shape {:?}",
            w_pre.dims(),
            w.dims()
        )));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::contract(format!("mixout probability {p} outside [0,1)")));
    }
    if p == 0.0 {
        return Ok(w.clone());
    }
    let mask = mixout_mask(w.numel(), p, rng);
    let data = w
        .data()
        .iter()
        .zip(w_pre.data())
        .zip(&mask)
        .map(|((w, t), m)| t + m * (w - t))
        .collect();
    Tensor::new(w.dims(), data)
}

/// Binds `params` as leaves, routing every fully connected weight through a
/// mixout op toward its entry in `cfg.target`. One mask is drawn per weight
/// per call.
pub fn bind_with_mixout<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ParamMap,
    cfg: &MixoutConfig<'_>,
    rng: &mut R,
) -> Result<BoundParams> {
    let mut bound = BoundParams::default();
    for (name, t) in params {
        let leaf = tape.leaf(t.clone());
        if cfg.p > 0.0 && is_fully_connected_weight(name) {
            let target = cfg
                .target
                .get(name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            let mask = mixout_mask(t.numel(), cfg.p, rng);
            let eff = tape.mixout(leaf, target, mask)?;
            bound.insert(name.clone(), leaf, eff);
        } else {
            bound.insert(name.clone(), leaf, leaf);
        }
    }
    Ok(bound)
}

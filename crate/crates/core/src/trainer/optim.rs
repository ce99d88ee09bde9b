use indexmap::IndexMap;

use crate::encoder::ParamMap;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.01;

/// Whether a parameter receives weight decay. Biases and layer-norm gains
/// do not.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gain"))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl AdamW {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamMap) -> Self {
        Self::with_decay(params, WEIGHT_DECAY)
    }

    pub fn with_decay(params: &ParamMap, weight_decay: f64) -> Self {
        let zeros: IndexMap<String, Vec<f64>> = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            step: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    /// One update. `grads` must cover every parameter; `lr_of` gives each
    /// parameter's learning rate for this step.
    pub fn step(
        &mut self,
        params: &mut ParamMap,
        grads: &IndexMap<String, Vec<f64>>,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            let (m, v) = match (self.first.get_mut(name), self.second.get_mut(name)) {
                (Some(m), Some(v)) if m.len() == g.len() && g.len() == p.numel() => (m, v),
                _ => {
                    return Err(Error::contract(format!(
                        "optimizer state for {name:?} does not match its parameter"
                    )))
                }
            };
            let lr = lr_of(name);
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *w);
            }
        }
        Ok(())
    }
}

//! Re-initialization of the topmost encoder blocks.

use rand::Rng;

use super::llrd::layer_index;
use crate::encoder::ParamMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_REINIT_STD: f64 = 0.02;

/// Re-draws the parameters of blocks `L-n .. L-1`: weights from
/// `Normal(0, std²)`, biases to zero, layer-norm gains to one. Every other
/// tensor, the pooler included, is copied unchanged.
pub fn reinit_top_layers<R: Rng + ?Sized>(
    params: &ParamMap,
    num_layers: usize,
    n: usize,
    std: f64,
    rng: &mut R,
) -> Result<ParamMap> {
    if n > num_layers {
        return Err(Error::contract(format!(
            "cannot re-initialize {n} of {num_layers} layers"
        )));
    }
    let first = num_layers - n;
    let mut out = ParamMap::with_capacity(params.len());
    for (name, t) in params {
        let fresh = match layer_index(name) {
            Some(i) if i >= first && n > 0 => {
                if name.ends_with(".gain") {
                    Tensor::ones(t.dims())
                } else if name.ends_with(".bias") {
                    Tensor::zeros(t.dims())
                } else {
                    Tensor::randn(t.dims(), std, rng)
                }
            }
            _ => t.clone(),
        };
        out.insert(name.clone(), fresh);
    }
    Ok(out)
}

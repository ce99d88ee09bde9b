//! Sequence representations fed to the classification head.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolingMode {
    /// The pooler output of the final layer.
    Final,
    /// Mean of the BOS vectors of the last four layers.
    AvgLast4,
    /// Concatenation of the BOS vectors of the last four layers, oldest first.
    ConcatLast4,
}

impl PoolingMode {
    /// Length of the pooled feature vector for hidden size `hidden`.
    pub fn feature_dim(self, hidden: usize) -> usize {
        match self {
            PoolingMode::ConcatLast4 => 4 * hidden,
            _ => hidden,
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::Final => "final",
            PoolingMode::AvgLast4 => "avg4",
            PoolingMode::ConcatLast4 => "concat4",
        })
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "final" | "pooler" => Ok(PoolingMode::Final),
            "avg4" | "avg" | "avglast4" => Ok(PoolingMode::AvgLast4),
            "concat4" | "concat" | "concatlast4" => Ok(PoolingMode::ConcatLast4),
            other => Err(Error::config(format!(
                "unknown pooling mode {other:?} (expected final, avg4 or concat4)"
            ))),
        }
    }
}

fn check_depth(num_states: usize, mode: PoolingMode) -> Result<()> {
    if mode != PoolingMode::Final && num_states < 5 {
        return Err(Error::config(format!(
            "pooling {mode} needs at least 4 layers, got {}",
            num_states.saturating_sub(1)
        )));
    }
    Ok(())
}

/// Pools encoder outputs on a tape. `states` are the `L + 1` hidden states
/// `[seq × H]`, `pooled` the pooler output `[H]`.
pub fn pool_states(tape: &mut Tape, states: &[Var], pooled: Var, mode: PoolingMode) -> Result<Var> {
    check_depth(states.len(), mode)?;
    if mode == PoolingMode::Final {
        return Ok(pooled);
    }
    let last4 = &states[states.len() - 4..];
    let rows: Vec<Var> = last4
        .iter()
        .map(|s| tape.row(*s, 0))
        .collect::<Result<_>>()?;
    match mode {
        PoolingMode::AvgLast4 => {
            let mut acc = rows[0];
            for r in &rows[1..] {
                acc = tape.add(acc, *r)?;
            }
            Ok(tape.scale(acc, 0.25))
        }
        PoolingMode::ConcatLast4 => tape.concat_cols(&rows),
        PoolingMode::Final => unreachable!(),
    }
}

/// Tensor-valued [`pool_states`].
pub fn pool_states_eval(states: &[Tensor], pooled: &Tensor, mode: PoolingMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = states.iter().map(|s| tape.constant(s.clone())).collect();
    let p = tape.constant(pooled.clone());
    let out = pool_states(&mut tape, &vars, p, mode)?;
    Ok(tape.value(out).clone())
}

//! Class-weighted cross-entropy.
//!
//! Per sample `n` with target `t_n`:
//!
//! ```text
//! l_n = -Σ_c w_c · log softmax(x_n)_c · y_{n,c} = -w_{t_n} · log softmax(x_n)_{t_n}
//! ```
//!
//! The batch loss is `Σ_n l_n / Σ_n w_{t_n}` by default, or `Σ_n l_n / B`.

use std::str::FromStr;

use crate::autodiff::{log_softmax, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossReduction {
    /// Divide by the summed weights of the batch targets.
    #[default]
    WeightedMean,
    /// Divide by the batch size.
    Mean,
}

impl FromStr for LossReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted_mean" | "weighted-mean" => Ok(Self::WeightedMean),
            "mean" => Ok(Self::Mean),
            other => Err(Error::config(format!("unknown loss reduction {other:?}"))),
        }
    }
}

fn check_targets(num_classes: usize, targets: &[usize], weights: Option<&[f64]>) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != num_classes {
            return Err(Error::Shape {
                op: "weighted_cross_entropy",
                lhs: vec![num_classes],
                rhs: vec![w.len()],
            });
        }
    }
    if let Some((n, t)) = targets.iter().enumerate().find(|(_, &t)| t >= num_classes) {
        return Err(Error::data(format!(
            "sample {n}: target {t} outside [0, {num_classes})"
        )));
    }
    Ok(())
}

/// Weighted cross-entropy of `logits[B × C]` on a tape. `weights = None`
/// means every class has weight 1.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    weights: Option<&[f64]>,
    reduction: LossReduction,
) -> Result<Var> {
    let dims = tape.dims(logits).to_vec();
    if dims.len() != 2 || dims[0] != targets.len() {
        return Err(Error::Shape {
            op: "weighted_cross_entropy",
            lhs: dims,
            rhs: vec![targets.len()],
        });
    }
    check_targets(dims[1], targets, weights)?;
    let w_t: Vec<f64> = targets
        .iter()
        .map(|&t| weights.map_or(1.0, |w| w[t]))
        .collect();
    let denom = match reduction {
        LossReduction::WeightedMean => w_t.iter().sum::<f64>(),
        LossReduction::Mean => targets.len() as f64,
    };
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(logp, targets)?;
    let wv = tape.constant(Tensor::new(&[targets.len()], w_t)?);
    let weighted = tape.mul(picked, wv)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / denom))
}

/// Value-only [`weighted_cross_entropy`].
pub fn weighted_cross_entropy_value(
    logits: &Tensor,
    targets: &[usize],
    weights: &[f64],
    reduction: LossReduction,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = weighted_cross_entropy(&mut tape, l, targets, Some(weights), reduction)?;
    Ok(tape.value(out).item())
}

/// Unweighted mean cross-entropy, computed directly from log-softmax.
pub fn cross_entropy_value(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (b, c) = logits.as_matrix("cross_entropy")?;
    if b != targets.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: logits.dims().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    check_targets(c, targets, None)?;
    let logp = log_softmax(&logits.clone().reshape(&[b, c])?, 1)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(n, &t)| -logp.data()[n * c + t])
        .sum();
    Ok(total / b as f64)
}

/// Inverse-frequency class weights `w_c = total / (C · count_c)`.
pub fn class_weights_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::data("no class counts given"));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::data(format!("class {c} has zero examples")));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts
        .iter()
        .map(|&n| total as f64 / (k * n as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let l = weighted_cross_entropy_value(&logits, &[0], &[1.0, 1.0], LossReduction::WeightedMean)
            .unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_target_gives_zero_loss() {
        let logits = Tensor::new(&[1, 2], vec![50.0, 0.0]).unwrap();
        let l = weighted_cross_entropy_value(&logits, &[0], &[1.0, 1.0], LossReduction::WeightedMean)
            .unwrap();
        assert!(l < 1e-20, "{l}");
    }

    #[test]
    fn out_of_range_target_names_sample() {
        let logits = Tensor::zeros(&[3, 2]);
        let err = weighted_cross_entropy_value(&logits, &[0, 1, 2], &[1.0, 1.0], LossReduction::Mean)
            .unwrap_err();
        match err {
            Error::Data(msg) => assert!(msg.contains("sample 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mean_reduction_divides_by_batch() {
        let logits = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = [2.0, 0.5];
        let a = weighted_cross_entropy_value(&logits, &[0, 1], &w, LossReduction::Mean).unwrap();
        let b = weighted_cross_entropy_value(&logits, &[0, 1], &w, LossReduction::WeightedMean)
            .unwrap();
        assert!((a * 2.0 / 2.5 - b).abs() < 1e-15);
    }

    #[test]
    fn balanced_counts_give_unit_weights() {
        assert_eq!(class_weights_from_counts(&[7, 7, 7]).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn stage_one_counts() {
        let w = class_weights_from_counts(&[13291, 4909]).unwrap();
        assert!((w[0] - 0.6847).abs() < 1e-4, "{}", w[0]);
        assert!((w[1] - 1.8537).abs() < 1e-4, "{}", w[1]);
        let weighted: f64 = w[0] * 13291.0 + w[1] * 4909.0;
        assert!((weighted - 18200.0).abs() < 1e-9);
    }

    #[test]
    fn zero_count_rejected() {
        assert!(matches!(class_weights_from_counts(&[3, 0]), Err(Error::Data(_))));
    }
}

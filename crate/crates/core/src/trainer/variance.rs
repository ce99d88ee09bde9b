use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::finetune::finetune;
use super::{Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, RunningStats};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let s: RunningStats = values.into_iter().collect();
        Self {
            mean: s.mean(),
            std: s.std(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VarianceReport {
    pub seeds: Vec<u64>,
    /// Final test metrics per seed, in `seeds` order.
    pub runs: Vec<MetricsReport>,
    pub precision: Summary,
    pub recall: Summary,
    pub accuracy: Summary,
    pub f_score: Summary,
}

impl VarianceReport {
    pub fn from_runs(seeds: Vec<u64>, runs: Vec<MetricsReport>) -> Self {
        let pick = |f: fn(&MetricsReport) -> f64| Summary::of(runs.iter().map(f));
        Self {
            precision: pick(|r| r.precision),
            recall: pick(|r| r.recall),
            accuracy: pick(|r| r.accuracy),
            f_score: pick(|r| r.f_score),
            seeds,
            runs,
        }
    }
}

/// Fine-tunes once per seed (seed drives split, init, masks and batch
/// order) and summarizes the final test metrics. Runs execute in parallel
/// on the current rayon pool; results keep `seeds` order.
pub fn variance_study(
    pretrained: &Checkpoint,
    dataset: &Dataset,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<VarianceReport> {
    if seeds.len() < 2 {
        return Err(Error::contract(format!(
            "a variance study needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig {
                seed,
                ..config.clone()
            };
            finetune(pretrained, dataset, &cfg).map(|o| o.test)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VarianceReport::from_runs(seeds.to_vec(), runs))
}

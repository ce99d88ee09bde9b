//! Confusion matrices and precision / recall / accuracy / F-score reports.
//!
//! Zero denominators yield 0 and set a `degenerate` flag; no metric is ever
//! NaN. Macro F-score is the unweighted mean of per-class F-scores; the F of
//! the macro precision and recall is carried alongside as
//! [`MetricsReport::f_of_means`].

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    num_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![0; num_classes * num_classes],
            num_classes,
        }
    }

    /// Builds a matrix from rows of counts (row = true class).
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::data("confusion matrix rows must be square"));
        }
        Ok(Self {
            counts: rows.concat(),
            num_classes: c,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Count of examples with true class `truth` predicted as `pred`.
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.num_classes).map(|j| self.get(truth, j)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, pred)).sum()
    }
}

/// Accumulates a confusion matrix from true and predicted labels.
pub fn confusion(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::data(format!(
            "label length mismatch: {} true vs {} predicted",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t >= num_classes || p >= num_classes {
            return Err(Error::data(format!(
                "example {i}: label pair ({t}, {p}) outside [0, {num_classes})"
            )));
        }
        cm.counts[t * num_classes + p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub support: u64,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    Binary { positive: usize },
    Macro,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub averaging: Averaging,
    pub per_class: Vec<ClassMetrics>,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f_score: f64,
    /// Harmonic mean of `precision` and `recall`.
    pub f_of_means: f64,
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn one_vs_rest(cm: &ConfusionMatrix, class: usize) -> ClassMetrics {
    let tp = cm.get(class, class);
    let (precision, dp) = ratio(tp, cm.col_sum(class));
    let (recall, dr) = ratio(tp, cm.row_sum(class));
    let f_score = harmonic(precision, recall);
    ClassMetrics {
        precision,
        recall,
        f_score,
        support: cm.row_sum(class),
        degenerate: dp || dr || precision + recall == 0.0,
    }
}

fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.trace(), cm.total()).0
}

/// Precision, recall and F-score of `positive` in a two-class matrix, with
/// accuracy over all examples.
pub fn binary_report(cm: &ConfusionMatrix, positive: usize) -> Result<MetricsReport> {
    if cm.num_classes() != 2 || positive > 1 {
        return Err(Error::contract(format!(
            "binary report needs a 2-class matrix and positive class 0 or 1, got {} classes and {positive}",
            cm.num_classes()
        )));
    }
    let per_class: Vec<ClassMetrics> = (0..2).map(|c| one_vs_rest(cm, c)).collect();
    let pos = per_class[positive];
    Ok(MetricsReport {
        averaging: Averaging::Binary { positive },
        precision: pos.precision,
        recall: pos.recall,
        accuracy: accuracy(cm),
        f_score: pos.f_score,
        f_of_means: pos.f_score,
        degenerate: pos.degenerate,
        per_class,
    })
}

/// Macro-averaged report: unweighted means of one-vs-rest per-class metrics.
pub fn macro_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let c = cm.num_classes();
    if c < 2 {
        return Err(Error::contract("macro report needs at least 2 classes"));
    }
    let per_class: Vec<ClassMetrics> = (0..c).map(|k| one_vs_rest(cm, k)).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    let precision = mean(|m| m.precision);
    let recall = mean(|m| m.recall);
    Ok(MetricsReport {
        averaging: Averaging::Macro,
        precision,
        recall,
        accuracy: accuracy(cm),
        f_score: mean(|m| m.f_score),
        f_of_means: harmonic(precision, recall),
        degenerate: per_class.iter().any(|m| m.degenerate),
        per_class,
    })
}

/// Binary report on class 1 for two-class problems, macro report otherwise.
pub fn default_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.num_classes() == 2 {
        binary_report(cm, 1)
    } else {
        macro_report(cm)
    }
}

/// Running mean and sample standard deviation (Welford's update).
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample (n − 1) standard deviation; 0 for fewer than two values.
    pub fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = RunningStats::default();
        for x in iter {
            s.push(x);
        }
        s
    }
}

use rand::seq::SliceRandom;

use super::rng::{stream_rng, Stream};
use crate::data::LabeledExample;
use crate::error::{Error, Result};

/// Smallest class size [`split_dataset`] accepts.
pub const MIN_PER_CLASS: usize = 5;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

/// Index form of [`split_dataset`]: positions into the input slice.
pub fn split_indices(labels: &[usize], seed: u64) -> Result<[Vec<usize>; 3]> {
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = stream_rng(seed, Stream::Split);
    let mut out: [Vec<usize>; 3] = Default::default();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < MIN_PER_CLASS {
            return Err(Error::data(format!(
                "class {class} has {} examples; at least {MIN_PER_CLASS} are needed to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = n / 5;
        let n_test = n / 5;
        let n_train = n - n_val - n_test;
        out[0].extend_from_slice(&idx[..n_train]);
        out[1].extend_from_slice(&idx[n_train..n_train + n_val]);
        out[2].extend_from_slice(&idx[n_train + n_val..]);
    }
    if out[0].is_empty() {
        return Err(Error::data("cannot split an empty dataset"));
    }
    Ok(out)
}

/// Stratified 60/20/20 split. Each class is shuffled with the seed's split
/// stream; validation and test take `⌊n/5⌋` each and train the remainder.
pub fn split_dataset(examples: &[LabeledExample], seed: u64) -> Result<Splits> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let [tr, va, te] = split_indices(&labels, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect();
    Ok(Splits {
        train: pick(&tr),
        val: pick(&va),
        test: pick(&te),
    })
}

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::{stream, Rng};

/// Seeded random partition into `(train, test)`; `floor(n * ratio)` samples
/// go to train. Both parts keep the original sample order.
pub fn split_train_test(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n = data.len();
    let n_train = ((n as f64) * ratio + 1e-9).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "ratio {ratio} leaves an empty side for {n} samples"
        )));
    }
    let perm = Rng::keyed(seed, &[stream::SPLIT]).permutation(n);
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train)?, data.subset(&test)?))
}

/// Fold index of every sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub fold_of_sample: Vec<usize>,
    pub n_folds: usize,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in &self.fold_of_sample {
            sizes[f] += 1;
        }
        sizes
    }

    /// Validation indices of `fold`.
    pub fn holdout(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_sample.len())
            .filter(|&i| self.fold_of_sample[i] == fold)
            .collect()
    }

    /// Training indices when `fold` is held out.
    pub fn rest(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_sample.len())
            .filter(|&i| self.fold_of_sample[i] != fold)
            .collect()
    }
}

pub fn make_folds(train: &Dataset, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    if train.len() < n_folds {
        return Err(Error::Config(format!(
            "{} samples cannot fill {n_folds} folds",
            train.len()
        )));
    }
    let perm = Rng::keyed(seed, &[stream::FOLDS]).permutation(train.len());
    let mut fold_of_sample = vec![0; train.len()];
    for (pos, &i) in perm.iter().enumerate() {
        fold_of_sample[i] = pos % n_folds;
    }
    Ok(FoldAssignment {
        fold_of_sample,
        n_folds,
    })
}

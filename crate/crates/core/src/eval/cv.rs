use std::cmp::Ordering;

use crate::data::{make_folds, Dataset};
use crate::error::{Error, Result};

use super::compute_metrics;

#[derive(Clone, Debug, PartialEq)]
pub struct CvEntry<C> {
    pub config: C,
    /// Validation MAE(d) of each fold.
    pub fold_mae_d: Vec<f64>,
    pub mean_mae_d: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvResult<C> {
    pub best: C,
    pub entries: Vec<CvEntry<C>>,
}

/// k-fold selection over `grid`. For every config and fold, `recipe`
/// receives the config, the remaining folds (labels included) and the
/// held-out fold without labels, and returns predictions for the held-out
/// samples. The config with the lowest mean held-out MAE(d) wins; ties go to
/// the smaller config.
pub fn cross_validate<C, F>(train: &Dataset, grid: &[C], n_folds: usize, seed: u64, mut recipe: F) -> Result<CvResult<C>>
where
    C: Clone + PartialOrd,
    F: FnMut(&C, &Dataset, &Dataset) -> Result<Vec<[f64; 2]>>,
{
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let labels = train.labels()?;
    let folds = make_folds(train, n_folds, seed)?;
    let mut entries = Vec::with_capacity(grid.len());
    for config in grid {
        let mut fold_mae_d = Vec::with_capacity(n_folds);
        for fold in 0..n_folds {
            let hold = folds.holdout(fold);
            let fit = train.subset(&folds.rest(fold))?;
            let held = train.subset(&hold)?.unlabeled();
            let preds = recipe(config, &fit, &held)?;
            let truth: Vec<[f64; 2]> = hold.iter().map(|&i| labels[i]).collect();
            fold_mae_d.push(compute_metrics(&preds, &truth)?.mean.mae_d);
        }
        let mean_mae_d = fold_mae_d.iter().sum::<f64>() / n_folds as f64;
        log::info!("cv entry: mean validation MAE(d) {mean_mae_d:.4}");
        entries.push(CvEntry {
            config: config.clone(),
            fold_mae_d,
            mean_mae_d,
        });
    }
    let best = entries
        .iter()
        .min_by(|a, b| {
            a.mean_mae_d
                .total_cmp(&b.mean_mae_d)
                .then_with(|| a.config.partial_cmp(&b.config).unwrap_or(Ordering::Equal))
        })
        .expect("grid is non-empty")
        .config
        .clone();
    Ok(CvResult { best, entries })
}

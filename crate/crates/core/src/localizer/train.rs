use serde::{Deserialize, Serialize};

use super::{compute_source_stats, Localizer, LocalizerAdam};
use crate::data::{fit_normalizer, Dataset};
use crate::error::{Error, Result};
use crate::nn::{stream, AdamConfig, Mode, RegressionLoss, Rng, Tensor};

/// Supervised training hyperparameters (source pre-training and the
/// labeled-target oracle).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction held out for early stopping; 0 disables it.
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub loss: RegressionLoss,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            val_fraction: 0.1,
            patience: 10,
            loss: RegressionLoss::L1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept when early stopping was active.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss";

    pub fn csv_rows(&self) -> Vec<String> {
        self.epochs
            .iter()
            .map(|e| {
                let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
                format!("{},{},{val}", e.epoch, e.train_loss)
            })
            .collect()
    }
}

const SALT_SOURCE: u64 = 11;
const SALT_ORACLE: u64 = 12;

fn validation_split(n: usize, fraction: f64, seed: u64, salt: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64) * fraction + 1e-9).floor() as usize;
    let perm = Rng::keyed(seed, &[stream::SPLIT, salt]).permutation(n);
    let mut val = perm[..n_val].to_vec();
    let mut train = perm[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn label_tensor(data: &Dataset) -> Result<Tensor> {
    Tensor::from_rows(&data.labels()?)
}

/// Trains a fresh localizer on labeled source data. The normalizer is fitted
/// on the training portion; source statistics are computed on the final
/// model over all of `source`.
pub fn train_source(source: &Dataset, cfg: &TrainConfig) -> Result<(Localizer, TrainHistory)> {
    if !source.is_labeled() {
        return Err(Error::Usage("source training needs a labeled dataset".into()));
    }
    cfg.validate()?;
    let (train_idx, val_idx) = validation_split(source.len(), cfg.val_fraction, cfg.seed, SALT_SOURCE);
    let norm = fit_normalizer(&source.subset(&train_idx)?)?;
    let mut model = Localizer::init(cfg.seed, norm)?;
    let history = fit(&mut model, source, &train_idx, &val_idx, cfg, SALT_SOURCE)?;
    model.source_stats = Some(compute_source_stats(&model, source)?);
    model.meta.insert("kind".into(), "source".into());
    model.meta.insert("seed".into(), cfg.seed.to_string());
    model.meta.insert("epochs_run".into(), history.epochs.len().to_string());
    model.meta.insert("loss".into(), format!("{:?}", cfg.loss).to_lowercase());
    Ok((model, history))
}

/// Continues supervised training on labeled target data from the given
/// weights. Normalization and source statistics are kept.
pub fn finetune_oracle(model: &Localizer, target: &Dataset, cfg: &TrainConfig) -> Result<(Localizer, TrainHistory)> {
    if !target.is_labeled() {
        return Err(Error::Usage("oracle fine-tuning needs labeled target data".into()));
    }
    cfg.validate()?;
    let mut tuned = model.clone();
    let (train_idx, val_idx) = validation_split(target.len(), cfg.val_fraction, cfg.seed, SALT_ORACLE);
    let history = fit(&mut tuned, target, &train_idx, &val_idx, cfg, SALT_ORACLE)?;
    if cfg.epochs > 0 {
        tuned.meta.insert("kind".into(), "oracle".into());
        tuned.meta.insert("oracle_seed".into(), cfg.seed.to_string());
    }
    Ok((tuned, history))
}

fn eval_loss(model: &Localizer, x: &Tensor, y: &Tensor, loss: RegressionLoss) -> Result<f64> {
    let pred = model.infer(x)?;
    Ok(loss.eval(&pred, y)?.0)
}

fn fit(
    model: &mut Localizer,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    salt: u64,
) -> Result<TrainHistory> {
    let x_all = model.normalized_inputs(data);
    let y_all = label_tensor(data)?;
    let (x_val, y_val) = (x_all.select_rows(val_idx), y_all.select_rows(val_idx));
    let mut adam = LocalizerAdam::new(model, AdamConfig::with_lr(cfg.lr));
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Localizer)> = None;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.to_vec();
        Rng::keyed(cfg.seed, &[stream::SHUFFLE, salt, epoch as u64]).shuffle(&mut order);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let x = x_all.select_rows(batch);
            let y = y_all.select_rows(batch);
            let mut rng = Rng::keyed(cfg.seed, &[stream::DROPOUT, salt, epoch as u64, b as u64]);
            let (pred, tape) = model.forward(&x, Mode::Train(&mut rng))?;
            let (loss, grad) = cfg.loss.eval(&pred, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training loss diverged at epoch {epoch}, batch {b}"
                )));
            }
            model.backward(&tape, grad)?;
            adam.step(model)?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train_idx.len().max(1) as f64;
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            Some(eval_loss(model, &x_val, &y_val, cfg.loss)?)
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log::debug!("epoch {epoch}: train {train_loss:.4} val {val_loss:?}");

        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("validation loss diverged at epoch {epoch}")));
            }
            match &best {
                Some((b, _, _)) if v >= *b => {}
                _ => best = Some((v, epoch, model.clone())),
            }
            let best_epoch = best.as_ref().map(|b| b.1).unwrap_or(epoch);
            if epoch - best_epoch >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, epoch, snapshot)) = best {
        model.copy_weights_from(&snapshot);
        history.best_epoch = Some(epoch);
    }
    Ok(history)
}

//! Adversarial adaptation baseline with access to labeled source data. The
//! extractor is trained on `L_reg - L_disc` by explicit gradient arithmetic.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::localizer::{Localizer, FEATURE_DIM};
use crate::nn::{l1_loss, stream, Adam, AdamConfig, Mode, Rng, Sequential, Tape, Tensor};

/// Floor applied inside the discriminator log terms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DannConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DannConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl DannConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Domain classifier on flattened extractor features; outputs the
/// probability that a feature vector came from the source domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    net: Sequential,
}

impl Discriminator {
    pub fn init(seed: u64) -> Result<Self> {
        let net = Sequential::builder()
            .dense("disc1", FEATURE_DIM, 128)
            .relu()
            .dense("disc2", 128, 64)
            .relu()
            .dense("disc_out", 64, 1)
            .sigmoid()
            .build(&mut Rng::keyed(seed, &[stream::INIT, 2]))?;
        Ok(Self { net })
    }

    pub fn net(&self) -> &Sequential {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    /// `[batch, 1]` source probabilities.
    pub fn infer(&self, features: &Tensor) -> Result<Tensor> {
        self.net.infer(features)
    }

    fn forward(&self, features: &Tensor) -> Result<(Tensor, Tape)> {
        self.net.forward(features, Mode::Eval)
    }
}

/// `-(1/B) Σ [log D_s + log(1 - D_t)]` on discriminator outputs, with the
/// gradients with respect to `d_source` and `d_target`.
pub fn disc_loss_with_grad(d_source: &Tensor, d_target: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    if d_source.shape() != d_target.shape() {
        return Err(Error::Shape(format!(
            "source outputs {:?} vs target outputs {:?}",
            d_source.shape(),
            d_target.shape()
        )));
    }
    let b = d_source.len() as f64;
    let mut gs = Tensor::zeros(d_source.shape());
    let mut gt = Tensor::zeros(d_target.shape());
    let mut total = 0.0;
    for (g, &d) in gs.data_mut().iter_mut().zip(d_source.data()) {
        let p = d.max(LOG_FLOOR);
        total -= p.ln();
        *g = if d > LOG_FLOOR { -1.0 / (b * p) } else { 0.0 };
    }
    for (g, &d) in gt.data_mut().iter_mut().zip(d_target.data()) {
        let q = (1.0 - d).max(LOG_FLOOR);
        total -= q.ln();
        *g = if 1.0 - d > LOG_FLOOR { 1.0 / (b * q) } else { 0.0 };
    }
    Ok((total / b, gs, gt))
}

pub fn disc_loss(d_source: &Tensor, d_target: &Tensor) -> Result<f64> {
    Ok(disc_loss_with_grad(d_source, d_target)?.0)
}

/// Batch mean of `|dx| + |dy|`.
pub fn reg_loss(pred: &Tensor, labels: &Tensor) -> Result<f64> {
    Ok(l1_loss(pred, labels)?.0)
}

/// Which terms feed the extractor gradient. `Both` is the training rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorObjective {
    Both,
    RegressionOnly,
    DiscriminatorOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DannLosses {
    pub reg: f64,
    pub disc: f64,
}

impl DannLosses {
    pub fn feat(&self) -> f64 {
        self.reg - self.disc
    }
}

/// Normalized source inputs with labels, and normalized target inputs, for
/// one step. Source and target batches must have the same size.
pub struct DannBatch {
    pub source_x: Tensor,
    pub source_y: Tensor,
    pub target_x: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DannEpoch {
    pub epoch: usize,
    pub reg: f64,
    pub disc: f64,
    pub feat: f64,
}

impl DannEpoch {
    pub const CSV_HEADER: &'static str = "epoch,l_reg,l_disc,l_feat";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.reg, self.disc, self.feat)
    }
}

/// Localizer, discriminator and their optimizer states.
#[derive(Clone)]
pub struct Dann {
    pub model: Localizer,
    pub disc: Discriminator,
    adam_f: Adam,
    adam_r: Adam,
    adam_d: Adam,
}

impl Dann {
    pub fn new(model: &Localizer, cfg: &DannConfig) -> Result<Self> {
        cfg.validate()?;
        let disc = Discriminator::init(cfg.seed)?;
        let adam = AdamConfig::with_lr(cfg.lr);
        Ok(Self {
            adam_f: Adam::new(model.extractor().params(), adam),
            adam_r: Adam::new(model.regressor().params(), adam),
            adam_d: Adam::new(disc.net.params(), adam),
            model: model.clone(),
            disc,
        })
    }

    pub fn zero_grad(&mut self) {
        self.model.zero_grad();
        self.disc.net.params_mut().zero_grad();
    }

    /// Both losses at the current parameters, without touching gradients.
    pub fn losses(&self, batch: &DannBatch, rng: &mut Rng) -> Result<DannLosses> {
        let (fs, _) = self.model.features(&batch.source_x, Mode::Train(rng))?;
        let (ft, _) = self.model.features(&batch.target_x, Mode::Train(rng))?;
        let (pred, _) = self.model.regressor().forward(&fs, Mode::Train(rng))?;
        let reg = reg_loss(&pred, &batch.source_y)?;
        let disc = disc_loss(&self.disc.infer(&fs)?, &self.disc.infer(&ft)?)?;
        Ok(DannLosses { reg, disc })
    }

    /// Accumulates all three gradients at the current parameters. The
    /// regressor receives `∇L_reg`, the discriminator `∇L_disc`, and the
    /// extractor the gradient of the chosen objective.
    pub fn accumulate_gradients(
        &mut self,
        batch: &DannBatch,
        objective: ExtractorObjective,
        rng: &mut Rng,
    ) -> Result<DannLosses> {
        if batch.source_x.rows() != batch.target_x.rows() {
            return Err(Error::Shape("source and target batches differ in size".into()));
        }
        let (fs, tape_fs) = self.model.features(&batch.source_x, Mode::Train(rng))?;
        let (ft, tape_ft) = self.model.features(&batch.target_x, Mode::Train(rng))?;
        let (pred, tape_r) = self.model.regressor().forward(&fs, Mode::Train(rng))?;
        let (reg, g_pred) = l1_loss(&pred, &batch.source_y)?;
        let (ds, tape_ds) = self.disc.forward(&fs)?;
        let (dt, tape_dt) = self.disc.forward(&ft)?;
        let (disc, g_ds, g_dt) = disc_loss_with_grad(&ds, &dt)?;

        let g_fs_reg = self.model.regressor_mut().backward(&tape_r, g_pred)?;
        let g_fs_disc = self.disc.net.backward(&tape_ds, g_ds)?;
        let g_ft_disc = self.disc.net.backward(&tape_dt, g_dt)?;

        let (w_reg, w_disc) = match objective {
            ExtractorObjective::Both => (1.0, -1.0),
            ExtractorObjective::RegressionOnly => (1.0, 0.0),
            ExtractorObjective::DiscriminatorOnly => (0.0, -1.0),
        };
        let mut g_fs = Tensor::zeros(fs.shape());
        for ((g, &r), &d) in g_fs.data_mut().iter_mut().zip(g_fs_reg.data()).zip(g_fs_disc.data()) {
            *g = w_reg * r + w_disc * d;
        }
        let mut g_ft = g_ft_disc;
        g_ft.data_mut().iter_mut().for_each(|g| *g *= w_disc);
        self.model.extractor_mut().backward(&tape_fs, g_fs)?;
        self.model.extractor_mut().backward(&tape_ft, g_ft)?;
        Ok(DannLosses { reg, disc })
    }

    pub fn step_regressor(&mut self) -> Result<()> {
        self.adam_r.step(self.model.regressor_mut().params_mut())
    }

    pub fn step_extractor(&mut self) -> Result<()> {
        self.adam_f.step(self.model.extractor_mut().params_mut())
    }

    pub fn step_discriminator(&mut self) -> Result<()> {
        self.adam_d.step(self.disc.net.params_mut())
    }

    /// One adversarial update: regressor, then extractor, then discriminator,
    /// all from gradients taken at the same point.
    pub fn train_step(&mut self, batch: &DannBatch, rng: &mut Rng) -> Result<DannLosses> {
        self.zero_grad();
        let losses = self.accumulate_gradients(batch, ExtractorObjective::Both, rng)?;
        if !(losses.reg.is_finite() && losses.disc.is_finite()) {
            return Err(Error::Numerical(format!("non-finite adversarial loss {losses:?}")));
        }
        self.step_regressor()?;
        self.step_extractor()?;
        self.step_discriminator()?;
        Ok(losses)
    }
}

const SALT: u64 = 31;

/// Trains the localizer adversarially on labeled `source` and unlabeled
/// `target`. Each epoch walks the larger set once and cycles the smaller.
pub fn run_dann(
    model: &Localizer,
    source: &Dataset,
    target: &Dataset,
    cfg: &DannConfig,
) -> Result<(Localizer, Vec<DannEpoch>)> {
    if !source.is_labeled() {
        return Err(Error::Usage("adversarial adaptation needs labeled source data".into()));
    }
    let mut dann = Dann::new(model, cfg)?;
    let xs_all = model.normalized_inputs(source);
    let ys_all = Tensor::from_rows(&source.labels()?)?;
    let xt_all = model.normalized_inputs(target);
    let (ns, nt) = (source.len(), target.len());
    let steps = ns.max(nt).div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let order_s = Rng::keyed(cfg.seed, &[stream::SHUFFLE, SALT, e, 0]).permutation(ns);
        let order_t = Rng::keyed(cfg.seed, &[stream::SHUFFLE, SALT, e, 1]).permutation(nt);
        let mut sum = DannLosses::default();
        for b in 0..steps {
            let start = b * cfg.batch_size;
            let end = (start + cfg.batch_size).min(ns.max(nt));
            let is: Vec<usize> = (start..end).map(|i| order_s[i % ns]).collect();
            let it: Vec<usize> = (start..end).map(|i| order_t[i % nt]).collect();
            let batch = DannBatch {
                source_x: xs_all.select_rows(&is),
                source_y: ys_all.select_rows(&is),
                target_x: xt_all.select_rows(&it),
            };
            let mut rng = Rng::keyed(cfg.seed, &[stream::DROPOUT, SALT, e, b as u64]);
            let l = dann.train_step(&batch, &mut rng).map_err(|err| match err {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
            sum.reg += l.reg;
            sum.disc += l.disc;
        }
        let n = steps as f64;
        let rec = DannEpoch {
            epoch,
            reg: sum.reg / n,
            disc: sum.disc / n,
            feat: (sum.reg - sum.disc) / n,
        };
        log::debug!("dann epoch {epoch}: reg {:.4} disc {:.4}", rec.reg, rec.disc);
        history.push(rec);
    }
    let mut out = dann.model;
    out.meta.insert("kind".into(), "dann".into());
    out.meta.insert("adapt_epochs".into(), cfg.epochs.to_string());
    out.meta.insert("adapt_seed".into(), cfg.seed.to_string());
    Ok((out, history))
}

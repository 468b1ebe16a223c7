//! Source-free regression baseline: adapts only the feature extractor under a
//! frozen regressor, using view consistency, an optional EMA teacher, and
//! alignment to stored source prediction and feature statistics.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::localizer::{mean_and_covariance, Localizer, SourceStats, FEATURE_DIM};
use crate::mtloc::ema_decay;
use crate::nn::{gemm, stream, Adam, AdamConfig, Mode, Rng, Sequential, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShotConfig {
    pub lambda_cons: f64,
    pub lambda_teach: f64,
    pub lambda_stat: f64,
    pub lambda_coral: f64,
    pub lr: f64,
    /// Teacher keeps this share of its own weights at every update.
    pub ema_decay: f64,
    pub weak_noise_std: f64,
    pub strong_mask_prob: f64,
    pub strong_noise_std: f64,
    pub use_teacher: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ShotConfig {
    fn default() -> Self {
        Self {
            lambda_cons: 1.0,
            lambda_teach: 0.5,
            lambda_stat: 0.10,
            lambda_coral: 0.02,
            lr: 1e-3,
            ema_decay: 0.995,
            weak_noise_std: 0.01,
            strong_mask_prob: 0.10,
            strong_noise_std: 0.05,
            use_teacher: true,
            epochs: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ShotConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_cons, self.lambda_teach, self.lambda_stat, self.lambda_coral];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || !(0.0..=1.0).contains(&self.strong_mask_prob) {
            return Err(Error::Config("ema_decay and strong_mask_prob must lie in [0, 1]".into()));
        }
        if !(self.weak_noise_std >= 0.0 && self.strong_noise_std >= 0.0) {
            return Err(Error::Config("noise std must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Adds `N(0, std²)` to every element.
pub fn augment_weak(z: &Tensor, std: f64, rng: &mut Rng) -> Tensor {
    let mut out = z.clone();
    if std > 0.0 {
        out.data_mut().iter_mut().for_each(|v| *v += rng.normal(std));
    }
    out
}

/// Zeroes each element with probability `mask_prob`, then adds `N(0, std²)`.
pub fn augment_strong(z: &Tensor, mask_prob: f64, std: f64, rng: &mut Rng) -> Tensor {
    let mut out = z.clone();
    for v in out.data_mut() {
        if mask_prob > 0.0 && rng.uniform() < mask_prob {
            *v = 0.0;
        }
        if std > 0.0 {
            *v += rng.normal(std);
        }
    }
    out
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Batch mean of squared distances, and its gradient with respect to `a`.
fn mean_sq_dist(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    check_pair(a, b)?;
    let inv_b = 1.0 / a.rows() as f64;
    let mut g = Tensor::zeros(a.shape());
    let mut total = 0.0;
    for ((g, x), y) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        let d = x - y;
        total += d * d;
        *g = 2.0 * d * inv_b;
    }
    Ok((total * inv_b, g))
}

/// Mean squared distance between weak- and strong-view predictions.
pub fn consistency_loss(y_weak: &Tensor, y_strong: &Tensor) -> Result<f64> {
    Ok(mean_sq_dist(y_weak, y_strong)?.0)
}

/// Mean squared distance between student and teacher predictions.
pub fn teacher_loss(y_student: &Tensor, y_teacher: &Tensor) -> Result<f64> {
    Ok(mean_sq_dist(y_student, y_teacher)?.0)
}

fn need_two(n: usize, what: &str) -> Result<()> {
    if n < 2 {
        return Err(Error::Shape(format!("{what} needs a batch of at least 2, got {n}")));
    }
    Ok(())
}

/// Squared gaps between the batch mean/unbiased variance of predictions and
/// the stored source values, with the gradient.
pub fn pred_stat_loss_with_grad(preds: &Tensor, stats: &SourceStats) -> Result<(f64, Tensor)> {
    let b = preds.rows();
    need_two(b, "prediction statistics")?;
    if preds.row_len() != 2 {
        return Err(Error::Shape(format!("predictions must be [batch, 2], got {:?}", preds.shape())));
    }
    let (mean, cov) = mean_and_covariance(preds);
    let var = [cov[0], cov[3]];
    let mut loss = 0.0;
    let mut dmean = [0.0; 2];
    let mut dvar = [0.0; 2];
    for c in 0..2 {
        let gm = mean[c] - stats.pred_mean[c];
        let gv = var[c] - stats.pred_var[c];
        loss += gm * gm + gv * gv;
        dmean[c] = 2.0 * gm / b as f64;
        dvar[c] = 4.0 * gv / (b - 1) as f64;
    }
    let mut g = Tensor::zeros(preds.shape());
    for (row, y) in g.data_mut().chunks_exact_mut(2).zip(preds.data().chunks_exact(2)) {
        for c in 0..2 {
            row[c] = dmean[c] + dvar[c] * (y[c] - mean[c]);
        }
    }
    Ok((loss, g))
}

pub fn pred_stat_loss(preds: &Tensor, stats: &SourceStats) -> Result<f64> {
    Ok(pred_stat_loss_with_grad(preds, stats)?.0)
}

/// Squared Frobenius distance between the unbiased batch covariance of
/// `features` and `source_cov`, with the gradient.
pub fn coral_loss_with_grad(features: &Tensor, source_cov: &[f64]) -> Result<(f64, Tensor)> {
    let (n, d) = (features.rows(), features.row_len());
    need_two(n, "covariance alignment")?;
    if source_cov.len() != d * d {
        return Err(Error::Shape(format!("source covariance has {} entries for {d} features", source_cov.len())));
    }
    let (mean, cov) = mean_and_covariance(features);
    let diff: Vec<f64> = cov.iter().zip(source_cov).map(|(c, s)| c - s).collect();
    let loss = diff.iter().map(|v| v * v).sum();
    let mut centered = features.data().to_vec();
    for r in centered.chunks_exact_mut(d) {
        for (v, m) in r.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut grad = vec![0.0; n * d];
    gemm(n, d, d, &centered, false, &diff, false, &mut grad, false);
    let scale = 4.0 / (n - 1) as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss, Tensor::from_vec(features.shape(), grad)?))
}

pub fn coral_loss(features: &Tensor, source_cov: &[f64]) -> Result<f64> {
    Ok(coral_loss_with_grad(features, source_cov)?.0)
}

/// Unweighted loss terms and their weighted total for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShotLosses {
    pub cons: f64,
    pub teach: f64,
    pub stat: f64,
    pub coral: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShotEpoch {
    pub epoch: usize,
    pub losses: ShotLosses,
}

impl ShotEpoch {
    pub const CSV_HEADER: &'static str = "epoch,cons,teach,stat,coral,total";

    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!("{},{},{},{},{},{}", self.epoch, l.cons, l.teach, l.stat, l.coral, l.total)
    }
}

const SALT: u64 = 41;

/// Forward records and output gradients of one batch.
struct Pass {
    losses: ShotLosses,
    tape_w: Tape,
    tape_s: Tape,
    tape_gw: Tape,
    tape_gs: Tape,
    g_yw: Tensor,
    g_ys: Tensor,
    g_fw_coral: Option<Tensor>,
}

/// Adaptation state: trainable extractor, frozen regressor, optional teacher
/// extractor.
#[derive(Clone)]
pub struct Shot {
    cfg: ShotConfig,
    model: Localizer,
    stats: SourceStats,
    teacher: Option<Sequential>,
    adam: Adam,
}

impl Shot {
    pub fn new(model: &Localizer, cfg: &ShotConfig) -> Result<Self> {
        cfg.validate()?;
        let stats = model
            .source_stats
            .clone()
            .ok_or_else(|| Error::Usage("model carries no source statistics; retrain or re-export it".into()))?;
        stats.validate()?;
        if stats.feat_dim != FEATURE_DIM {
            return Err(Error::Shape(format!("source statistics cover {} features", stats.feat_dim)));
        }
        Ok(Self {
            cfg: cfg.clone(),
            teacher: cfg.use_teacher.then(|| model.extractor().clone()),
            adam: Adam::new(model.extractor().params(), AdamConfig::with_lr(cfg.lr)),
            model: model.clone(),
            stats,
        })
    }

    pub fn model(&self) -> &Localizer {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Localizer {
        &mut self.model
    }

    pub fn teacher(&self) -> Option<&Sequential> {
        self.teacher.as_ref()
    }

    /// Loss terms on normalized batch `x` without touching gradients.
    pub fn losses(&self, x: &Tensor, key: &[u64]) -> Result<ShotLosses> {
        Ok(self.pass(x, key)?.losses)
    }

    /// Total loss on normalized batch `x` and its extractor gradient, added
    /// to the extractor's accumulated gradients. All randomness comes from
    /// `key`, so repeated calls with the same key see the same views and
    /// dropout masks. Terms needing two samples are skipped for a batch of one.
    pub fn accumulate_gradients(&mut self, x: &Tensor, key: &[u64]) -> Result<ShotLosses> {
        let p = self.pass(x, key)?;
        let mut g_fw = self.model.regressor_mut().backward(&p.tape_gw, p.g_yw)?;
        let g_fs = self.model.regressor_mut().backward(&p.tape_gs, p.g_ys)?;
        self.model.regressor_mut().params_mut().zero_grad();
        if let Some(g) = p.g_fw_coral {
            g_fw.add_scaled(&g, self.cfg.lambda_coral)?;
        }
        self.model.extractor_mut().backward(&p.tape_w, g_fw)?;
        self.model.extractor_mut().backward(&p.tape_s, g_fs)?;
        Ok(p.losses)
    }

    fn pass(&self, x: &Tensor, key: &[u64]) -> Result<Pass> {
        let cfg = &self.cfg;
        let b = x.rows();
        let sub = |tag: u64| {
            let mut k = vec![tag, SALT];
            k.extend_from_slice(key);
            Rng::keyed(cfg.seed, &k)
        };
        let z_w = augment_weak(x, cfg.weak_noise_std, &mut sub(stream::AUGMENT));
        let z_s = augment_strong(x, cfg.strong_mask_prob, cfg.strong_noise_std, &mut sub(stream::STRONG_VIEW));
        let mut drop = sub(stream::DROPOUT);
        let (f_w, tape_w) = self.model.features(&z_w, Mode::Train(&mut drop))?;
        let (f_s, tape_s) = self.model.features(&z_s, Mode::Train(&mut drop))?;
        let (y_w, tape_gw) = self.model.regressor().forward(&f_w, Mode::Eval)?;
        let (y_s, tape_gs) = self.model.regressor().forward(&f_s, Mode::Eval)?;

        let mut losses = ShotLosses::default();
        let (cons, g_cons) = mean_sq_dist(&y_w, &y_s)?;
        losses.cons = cons;
        let mut g_yw = g_cons.clone();
        g_yw.data_mut().iter_mut().for_each(|g| *g *= cfg.lambda_cons);
        let mut g_ys = g_cons;
        g_ys.data_mut().iter_mut().for_each(|g| *g *= -cfg.lambda_cons);

        if let Some(teacher) = &self.teacher {
            let f_t = teacher.infer(&z_w.clone().reshape(&[b, x.row_len(), 1])?)?;
            let y_t = self.model.regressor().infer(&f_t)?;
            let (teach, g) = mean_sq_dist(&y_s, &y_t)?;
            losses.teach = teach;
            g_ys.add_scaled(&g, cfg.lambda_teach)?;
        }
        let mut g_fw_coral = None;
        if b >= 2 {
            let (stat, g) = pred_stat_loss_with_grad(&y_w, &self.stats)?;
            losses.stat = stat;
            g_yw.add_scaled(&g, cfg.lambda_stat)?;
            let (coral, g) = coral_loss_with_grad(&f_w, &self.stats.feat_cov)?;
            losses.coral = coral;
            g_fw_coral = Some(g);
        } else {
            log::warn!("batch of one: skipping statistics and covariance terms");
        }
        losses.total = cfg.lambda_cons * losses.cons
            + cfg.lambda_teach * losses.teach
            + cfg.lambda_stat * losses.stat
            + cfg.lambda_coral * losses.coral;
        Ok(Pass {
            losses,
            tape_w,
            tape_s,
            tape_gw,
            tape_gs,
            g_yw,
            g_ys,
            g_fw_coral,
        })
    }

    /// One extractor update followed by the teacher EMA.
    pub fn step(&mut self, x: &Tensor, key: &[u64]) -> Result<ShotLosses> {
        self.model.extractor_mut().params_mut().zero_grad();
        let losses = self.accumulate_gradients(x, key)?;
        if !losses.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {losses:?}")));
        }
        self.adam.step(self.model.extractor_mut().params_mut())?;
        if let Some(teacher) = &mut self.teacher {
            ema_decay(teacher.params_mut(), self.model.extractor().params(), self.cfg.ema_decay)?;
        }
        Ok(losses)
    }

    pub fn into_model(self) -> Localizer {
        self.model
    }
}

/// Adapts the extractor of `model` to the unlabeled `target` set.
pub fn run_shot(model: &Localizer, target: &Dataset, cfg: &ShotConfig) -> Result<(Localizer, Vec<ShotEpoch>)> {
    let mut shot = Shot::new(model, cfg)?;
    let x_all = model.normalized_inputs(target);
    let n = target.len();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = Rng::keyed(cfg.seed, &[stream::SHUFFLE, SALT, epoch as u64]).permutation(n);
        let mut sum = ShotLosses::default();
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let l = shot
                .step(&x_all.select_rows(idx), &[epoch as u64, b as u64])
                .map_err(|err| match err {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
            sum.cons += l.cons;
            sum.teach += l.teach;
            sum.stat += l.stat;
            sum.coral += l.coral;
            sum.total += l.total;
            batches += 1;
        }
        let k = batches as f64;
        let losses = ShotLosses {
            cons: sum.cons / k,
            teach: sum.teach / k,
            stat: sum.stat / k,
            coral: sum.coral / k,
            total: sum.total / k,
        };
        log::debug!("shot epoch {epoch}: total {:.4}", losses.total);
        history.push(ShotEpoch { epoch, losses });
    }
    let mut out = shot.into_model();
    out.meta.insert("kind".into(), "shot".into());
    out.meta.insert("adapt_epochs".into(), cfg.epochs.to_string());
    out.meta.insert("adapt_seed".into(), cfg.seed.to_string());
    Ok((out, history))
}
